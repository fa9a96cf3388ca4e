//! Monte-Carlo prediction and certification of smoothed classifiers.
//!
//! The hard smoothed classifier votes with the base classifier's argmax over
//! noise draws. [`smoothed_predict`] returns the top class only when a
//! two-sided binomial test separates it from the runner-up; [`certify`]
//! selects a class on one batch of draws, lower-bounds its vote probability on
//! a fresh batch with a Clopper-Pearson bound and converts the bound into a
//! Wasserstein radius.
//!
//! Each noise draw gets its own generator from a [`SeedStream`], so results
//! are independent of the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, Classifier};
use crate::dataset::LabeledDataset;
use crate::flow::Image;
use crate::noise::{NoiseSpec, Scheme};
use crate::rng::{phase, SeedStream};
use crate::stats::{binomial_two_sided_half, clopper_pearson_lower};
use crate::transport::GroundMetric;
use crate::{Error, Result};

/// Number of draws classified as each class.
pub fn vote_counts<C: Classifier + ?Sized>(
    classifier: &C,
    x: &Image,
    noise: &NoiseSpec,
    n: u64,
    seed: SeedStream,
) -> Vec<u64> {
    let k = classifier.num_classes();
    let shape = x.shape();
    let clean = x.flatten();
    (0..n)
        .into_par_iter()
        .fold(
            || (vec![0u64; k], clean.clone()),
            |(mut counts, mut buf), s| {
                buf.copy_from_slice(&clean);
                noise.add_noise_in_place(shape, &mut buf, &mut seed.rng_at(s));
                counts[classifier.predict(&buf)] += 1;
                (counts, buf)
            },
        )
        .map(|(counts, _)| counts)
        .reduce(
            || vec![0u64; k],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedPrediction {
    /// `None` means the smoothed classifier abstains.
    pub prediction: Option<usize>,
    pub n: u64,
    pub counts: Vec<u64>,
    pub top_count: u64,
    pub runner_up_count: u64,
    pub p_value: f64,
    pub alpha: f64,
}

/// Top class if its count beats the runner-up at level `alpha`.
pub fn predict_from_counts(counts: &[u64], alpha: f64) -> SmoothedPrediction {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // Stable sort keeps the lowest index first among equal counts.
    order.sort_by(|a, b| counts[*b].cmp(&counts[*a]));
    let top = order[0];
    let top_count = counts[top];
    let runner_up_count = order.get(1).map_or(0, |&i| counts[i]);
    let p_value = binomial_two_sided_half(top_count, runner_up_count);
    SmoothedPrediction {
        prediction: (p_value <= alpha && top_count > runner_up_count).then_some(top),
        n: counts.iter().sum(),
        counts: counts.to_vec(),
        top_count,
        runner_up_count,
        p_value,
        alpha,
    }
}

pub fn smoothed_predict<C: Classifier + ?Sized>(
    classifier: &C,
    x: &Image,
    noise: &NoiseSpec,
    n: u64,
    alpha: f64,
    seed: SeedStream,
) -> Result<SmoothedPrediction> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("prediction needs n >= 2, got {n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    check_input(classifier, x)?;
    let counts = vote_counts(classifier, x, noise, n, seed);
    Ok(predict_from_counts(&counts, alpha))
}

fn check_input<C: Classifier + ?Sized>(classifier: &C, x: &Image) -> Result<()> {
    let len = x.shape().input_len();
    if len != classifier.input_len() {
        return Err(Error::dims(classifier.input_len(), len));
    }
    Ok(())
}

/// Multiplier `c` in `radius = c * sigma * ln(p / (1 - p))`.
pub fn radius_constant(scheme: Scheme, ground: GroundMetric) -> f64 {
    let sqrt2 = std::f64::consts::SQRT_2;
    match (scheme, ground) {
        (Scheme::WassersteinFlow, GroundMetric::L1) => 1.0 / (2.0 * sqrt2),
        (Scheme::WassersteinFlow, GroundMetric::L2) => 0.25,
        // The pixel-L1 to Wasserstein conversion holds for any ground metric.
        (Scheme::LaplacePixel, _) => 1.0 / (4.0 * sqrt2),
    }
}

/// Certified radius for a lower bound on the top-class probability, or `None`
/// when the bound does not exceed 1/2.
pub fn radius_from_plower(p_lower: f64, sigma: f64, scheme: Scheme, ground: GroundMetric) -> Result<Option<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    if !(0.0..=1.0).contains(&p_lower) {
        return Err(Error::InvalidArgument(format!("p_lower must lie in [0, 1], got {p_lower}")));
    }
    if p_lower <= 0.5 {
        return Ok(None);
    }
    let log_odds = (p_lower / (1.0 - p_lower)).ln();
    Ok(Some(radius_constant(scheme, ground) * sigma * log_odds))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyParams {
    /// Draws used to select the candidate class.
    pub n0: u64,
    /// Draws used to bound its probability.
    pub n: u64,
    pub alpha: f64,
}

impl Default for CertifyParams {
    fn default() -> Self {
        CertifyParams {
            n0: 1000,
            n: 10_000,
            alpha: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// `None` means abstain.
    pub prediction: Option<usize>,
    /// Votes for the selected class among the `n` estimation draws.
    pub votes: u64,
    pub p_lower: f64,
    /// Radius in L2-ground-metric 1-Wasserstein units, present iff `p_lower > 1/2`.
    pub radius: Option<f64>,
    pub scheme: Scheme,
    pub sigma: f64,
    pub n0: u64,
    pub n: u64,
    pub alpha: f64,
}

pub fn certify<C: Classifier + ?Sized>(
    classifier: &C,
    x: &Image,
    noise: &NoiseSpec,
    params: &CertifyParams,
    seed: SeedStream,
) -> Result<Certificate> {
    if params.n0 == 0 || params.n == 0 {
        return Err(Error::InvalidArgument("n0 and n must be >= 1".into()));
    }
    check_input(classifier, x)?;
    let selection = vote_counts(classifier, x, noise, params.n0, seed.child(phase::CERTIFY_SELECT));
    let candidate = argmax_count(&selection);
    let estimate = vote_counts(classifier, x, noise, params.n, seed.child(phase::CERTIFY_ESTIMATE));
    let votes = estimate[candidate];
    let p_lower = clopper_pearson_lower(votes, params.n, params.alpha)?;
    let radius = if p_lower <= 0.5 {
        None
    } else if noise.sigma == 0.0 {
        Some(0.0)
    } else {
        radius_from_plower(p_lower, noise.sigma, noise.scheme, GroundMetric::L2)?
    };
    Ok(Certificate {
        prediction: radius.is_some().then_some(candidate),
        votes,
        p_lower,
        radius,
        scheme: noise.scheme,
        sigma: noise.sigma,
        n0: params.n0,
        n: params.n,
        alpha: params.alpha,
    })
}

fn argmax_count(counts: &[u64]) -> usize {
    let as_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    argmax(&as_f)
}

/// Mean base-classifier scores over `n` noise draws.
pub fn soft_smoothed_scores<C: Classifier + ?Sized>(
    classifier: &C,
    x: &Image,
    noise: &NoiseSpec,
    n: u64,
    seed: SeedStream,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    check_input(classifier, x)?;
    let per_sample: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| classifier.scores(&noise.noised_input(x, &mut seed.rng_at(s))))
        .collect();
    let mut mean = vec![0.0; classifier.num_classes()];
    for s in &per_sample {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok(mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationRecord {
    pub id: usize,
    pub label: usize,
    pub certificate: Certificate,
    pub correct: bool,
}

impl CertificationRecord {
    pub fn new(id: usize, label: usize, certificate: Certificate) -> Self {
        let correct = certificate.prediction == Some(label);
        CertificationRecord {
            id,
            label,
            certificate,
            correct,
        }
    }

    /// Radius if the certificate is for the true label.
    pub fn certified_correct_radius(&self) -> Option<f64> {
        if self.correct {
            self.certificate.radius
        } else {
            None
        }
    }
}

/// Certifies every image of a dataset; image `i` draws from `seed.child(i)`.
pub fn certify_dataset<C: Classifier + ?Sized>(
    classifier: &C,
    dataset: &LabeledDataset,
    noise: &NoiseSpec,
    params: &CertifyParams,
    seed: SeedStream,
) -> Result<Vec<CertificationRecord>> {
    dataset
        .images()
        .iter()
        .zip(dataset.labels())
        .enumerate()
        .map(|(id, (x, &label))| {
            let cert = certify(classifier, x, noise, params, seed.child(id as u64))?;
            Ok(CertificationRecord::new(id, label, cert))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianRadius {
    Radius(f64),
    /// Fewer than half of the records are certified for the correct label.
    NotCertified,
}

impl MedianRadius {
    pub fn value(self) -> Option<f64> {
        match self {
            MedianRadius::Radius(r) => Some(r),
            MedianRadius::NotCertified => None,
        }
    }
}

/// Largest radius certified for the correct label on at least half of all
/// records. Abstentions and misclassifications count against.
pub fn median_certified_radius(records: &[CertificationRecord]) -> Result<MedianRadius> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut radii: Vec<f64> = records.iter().filter_map(|r| r.certified_correct_radius()).collect();
    let needed = records.len().div_ceil(2);
    if radii.len() < needed {
        return Ok(MedianRadius::NotCertified);
    }
    radii.sort_by(|a, b| b.total_cmp(a));
    Ok(MedianRadius::Radius(radii[needed - 1]))
}

/// Aggregate statistics over a certification run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationSummary {
    pub images: usize,
    /// Fraction certified for the correct label (any radius).
    pub accuracy: f64,
    pub abstain_rate: f64,
    pub median_radius: MedianRadius,
}

pub fn summarize(records: &[CertificationRecord]) -> Result<CertificationSummary> {
    let median_radius = median_certified_radius(records)?;
    let n = records.len() as f64;
    Ok(CertificationSummary {
        images: records.len(),
        accuracy: records.iter().filter(|r| r.correct).count() as f64 / n,
        abstain_rate: records.iter().filter(|r| r.certificate.prediction.is_none()).count() as f64 / n,
        median_radius,
    })
}
