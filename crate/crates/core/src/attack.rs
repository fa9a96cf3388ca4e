//! Empirical robustness: projected gradient ascent in the flow domain.
//!
//! The attack perturbs an image by a local flow plan `delta`, kept inside an
//! L1 ball whose radius grows on a schedule. Because `||delta||_1` bounds the
//! L1-ground 1-Wasserstein distance from above (and that in turn bounds the
//! L2-ground distance), every reported budget is a valid Wasserstein radius.
//! Gradients come from the soft smoothed classifier; success is judged by the
//! hard smoothed classifier, with abstention counted as a misclassification.
//! Re-evaluating a noisy classifier after every step tends to over-count
//! misclassifications, so curves built from these results are lower bounds
//! on robustness.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::smoothed_predict;
use crate::classifier::{Classifier, DifferentiableClassifier};
use crate::dataset::LabeledDataset;
use crate::flow::{flow_adjoint, GridImage, Image, ImageShape, LocalFlowPlan, MultiChannelImage};
use crate::noise::NoiseSpec;
use crate::rng::{phase, SeedStream};
use crate::transport::{per_channel_wasserstein, wasserstein_grid_l1};
use crate::{Error, Result};

/// Images above this pixel count skip the oracle radius check.
pub const ORACLE_MAX_PIXELS: usize = 1024;

const EMPTY_PIXEL: f64 = 1e-12;

/// Euclidean projection onto `{y : ||y||_1 <= radius}`.
pub fn project_l1_ball(v: &[f64], radius: f64) -> Result<Vec<f64>> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be >= 0, got {radius}")));
    }
    let norm: f64 = v.iter().map(|x| x.abs()).sum();
    if norm <= radius {
        return Ok(v.to_vec());
    }
    if radius == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in mags.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - radius) / (k + 1) as f64;
        if u > t {
            theta = t;
        } else {
            break;
        }
    }
    Ok(v.iter().map(|x| x.signum() * (x.abs() - theta).max(0.0)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub iterations: usize,
    /// Noise draws per gradient estimate.
    pub gradient_samples: u64,
    /// Cap on the L1 budget of the flow perturbation.
    pub max_radius: f64,
    /// Starting radius; `None` means a tenth of `max_radius`.
    pub initial_radius: Option<f64>,
    pub growth_factor: f64,
    /// Iterations between radius increases.
    pub growth_interval: usize,
    /// L1 length of each normalized step, as a fraction of the current radius.
    pub step_size: f64,
    /// Draws for the hard smoothed prediction after each step.
    pub predict_samples: u64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            iterations: 200,
            gradient_samples: 128,
            max_radius: 1.0,
            initial_radius: None,
            growth_factor: 1.5,
            growth_interval: 10,
            step_size: 0.25,
            predict_samples: 10_000,
            alpha: 0.05,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gradient_samples > 0
            && self.max_radius >= 0.0
            && self.initial_radius.is_none_or(|r| r > 0.0)
            && self.growth_factor > 1.0
            && self.growth_interval > 0
            && self.step_size > 0.0
            && self.predict_samples >= 2
            && self.alpha > 0.0
            && self.alpha < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid attack config {self:?}")))
        }
    }

    /// Ball radius used at (0-based) step `t`.
    pub fn radius_at(&self, t: usize) -> f64 {
        let init = self.initial_radius.unwrap_or(0.1 * self.max_radius);
        let grown = init * self.growth_factor.powi((t / self.growth_interval) as i32);
        grown.min(self.max_radius)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub success: bool,
    /// Step at which the smoothed prediction first failed; 0 means the clean
    /// image was already misclassified or abstained on.
    pub iteration: Option<usize>,
    pub clean_correct: bool,
    /// Final flow perturbation, one plan per channel.
    pub delta: Vec<LocalFlowPlan>,
    /// `||delta||_1`, an upper bound on the Wasserstein perturbation.
    pub budget: f64,
    /// Exact L1-ground 1-Wasserstein distance to the perturbed image.
    pub oracle_radius: Option<f64>,
}

impl AttackResult {
    /// Whether the attack defeats the image within flow budget `radius`.
    ///
    /// Flips at zero budget after the clean evaluation are re-evaluation noise
    /// and only count for positive radii.
    pub fn broken_at(&self, radius: f64) -> bool {
        if !self.clean_correct {
            return true;
        }
        self.success && radius > 0.0 && self.budget <= radius
    }
}

fn flat_plans(shape: ImageShape, flat: &[f64]) -> Result<Vec<LocalFlowPlan>> {
    flat.chunks(shape.flow_len().max(1))
        .take(shape.channels)
        .map(|c| LocalFlowPlan::from_vec(shape.height, shape.width, c))
        .collect()
}

fn perturbed_image(x: &Image, flat_delta: &[f64]) -> Result<(Image, Vec<f64>)> {
    let plans = flat_plans(x.shape(), flat_delta)?;
    let values = x.apply_flows(&plans)?;
    let shape = x.shape();
    let grids: Vec<Array2<f64>> = values
        .chunks(shape.pixels())
        .map(|c| Array2::from_shape_vec((shape.height, shape.width), c.iter().map(|v| v.max(0.0)).collect()).expect("shape"))
        .collect();
    // Clamping only removes rounding-level negatives; feasibility is enforced by the caller.
    let total: f64 = grids.iter().map(|g| g.sum()).sum();
    let grids: Vec<Array2<f64>> = grids.into_iter().map(|g| g / total).collect();
    let img = match x {
        Image::Gray(_) => Image::Gray(GridImage::new(grids.into_iter().next().expect("one channel"))?),
        Image::Color(_) => Image::Color(MultiChannelImage::new(grids)?),
    };
    Ok((img, values))
}

/// Gradient of `-ln(mean soft score of label)` with respect to the flattened flow plan.
fn loss_gradient<C: DifferentiableClassifier + ?Sized>(
    classifier: &C,
    current: &Image,
    label: usize,
    noise: &NoiseSpec,
    samples: u64,
    seed: SeedStream,
) -> Vec<f64> {
    let shape = current.shape();
    let per_sample: Vec<(f64, Vec<f64>)> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let input = noise.noised_input(current, &mut seed.rng_at(s));
            let (scores, grad) = classifier.score_gradient(&input, label);
            (scores[label], grad)
        })
        .collect();
    let mut mean_score = 0.0;
    let mut mean_grad = vec![0.0; shape.input_len()];
    for (p, g) in &per_sample {
        mean_score += p;
        mean_grad.iter_mut().zip(g).for_each(|(m, v)| *m += v);
    }
    mean_score /= samples as f64;
    let scale = -1.0 / (samples as f64 * mean_score.max(1e-300));
    mean_grad
        .chunks(shape.pixels())
        .flat_map(|c| {
            let grid = Array2::from_shape_fn((shape.height, shape.width), |(i, j)| scale * c[i * shape.width + j]);
            flow_adjoint(&grid).to_vec()
        })
        .collect()
}

/// Zeroes gradient coordinates whose own share of a normalized step of L1
/// length `step` would overdraw the pixel they take mass from.
fn mask_overdrawn_sources(shape: ImageShape, values: &[f64], grad: &mut [f64], step: f64) {
    let (n, m) = (shape.height, shape.width);
    let nv = n.saturating_sub(1) * m;
    let flow_len = shape.flow_len().max(1);
    let source = |c: usize, k: usize, ascending: bool| {
        let (from, to) = if k < nv {
            let (i, j) = (k / m, k % m);
            (i * m + j, (i + 1) * m + j)
        } else {
            let h = k - nv;
            let (i, j) = (h / (m - 1), h % (m - 1));
            (i * m + j, i * m + j + 1)
        };
        c * shape.pixels() + if ascending { from } else { to }
    };
    // Renormalizing after a mask enlarges the surviving shares, so repeat a few times.
    for _ in 0..4 {
        let gnorm: f64 = grad.iter().map(|g| g.abs()).sum();
        if gnorm == 0.0 {
            return;
        }
        let mut changed = false;
        for (idx, gk) in grad.iter_mut().enumerate() {
            if *gk == 0.0 {
                continue;
            }
            let y = values[source(idx / flow_len, idx % flow_len, *gk > 0.0)];
            if y <= EMPTY_PIXEL || y < step * gk.abs() / gnorm {
                *gk = 0.0;
                changed = true;
            }
        }
        if !changed {
            return;
        }
    }
}

/// Largest `s` in `[0, 1]` with `prev + s (cand - prev) >= 0` everywhere.
fn feasible_fraction(prev: &[f64], cand: &[f64]) -> f64 {
    prev.iter()
        .zip(cand)
        .filter(|(_, c)| **c < 0.0)
        .map(|(p, c)| (p.max(0.0) / (p - c)).clamp(0.0, 1.0))
        .fold(1.0, f64::min)
}

fn oracle_radius(x: &Image, adv: &Image) -> Result<Option<f64>> {
    if x.shape().pixels() > ORACLE_MAX_PIXELS {
        return Ok(None);
    }
    Ok(Some(match (x, adv) {
        (Image::Gray(a), Image::Gray(b)) => wasserstein_grid_l1(a, b)?.0,
        (Image::Color(a), Image::Color(b)) => per_channel_wasserstein(a, b)?,
        _ => return Err(Error::InvalidArgument("image kinds differ".into())),
    }))
}

fn eval_stream(image_seed: SeedStream) -> SeedStream {
    image_seed.child(phase::ATTACK_EVAL)
}

/// Smoothed accuracy on unperturbed images, drawn from the same streams the
/// attack uses for its clean evaluation of each image.
pub fn clean_smoothed_accuracy<C: Classifier + ?Sized>(
    classifier: &C,
    dataset: &LabeledDataset,
    noise: &NoiseSpec,
    cfg: &AttackConfig,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let seed = SeedStream::new(cfg.seed);
    let mut correct = 0usize;
    for (id, (x, &label)) in dataset.images().iter().zip(dataset.labels()).enumerate() {
        let image_seed = seed.child(id as u64);
        let pred = smoothed_predict(classifier, x, noise, cfg.predict_samples, cfg.alpha, eval_stream(image_seed).child(0))?;
        correct += usize::from(pred.prediction == Some(label));
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Attacks one image with the configured schedule.
pub fn flow_pgd_attack<C: DifferentiableClassifier + ?Sized>(
    classifier: &C,
    x: &Image,
    label: usize,
    noise: &NoiseSpec,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    attack_with_seed(classifier, x, label, noise, cfg, SeedStream::new(cfg.seed))
}

fn attack_with_seed<C: DifferentiableClassifier + ?Sized>(
    classifier: &C,
    x: &Image,
    label: usize,
    noise: &NoiseSpec,
    cfg: &AttackConfig,
    seed: SeedStream,
) -> Result<AttackResult> {
    cfg.validate()?;
    let shape = x.shape();
    if shape.input_len() != classifier.input_len() {
        return Err(Error::dims(classifier.input_len(), shape.input_len()));
    }
    let eval_seed = eval_stream(seed);
    let grad_seed = seed.child(phase::ATTACK_GRADIENT);
    let mut delta = vec![0.0; shape.channels * shape.flow_len()];

    let clean = smoothed_predict(classifier, x, noise, cfg.predict_samples, cfg.alpha, eval_seed.child(0))?;
    let clean_correct = clean.prediction == Some(label);
    if !clean_correct {
        return Ok(AttackResult {
            success: true,
            iteration: Some(0),
            clean_correct,
            delta: flat_plans(shape, &delta)?,
            budget: 0.0,
            oracle_radius: Some(0.0),
        });
    }

    let (mut current, mut values) = perturbed_image(x, &delta)?;
    for t in 1..=cfg.iterations {
        let radius = cfg.radius_at(t - 1);
        let mut grad = loss_gradient(classifier, &current, label, noise, cfg.gradient_samples, grad_seed.child(t as u64));
        let step = cfg.step_size * radius;
        mask_overdrawn_sources(shape, &values, &mut grad, step);
        let gnorm: f64 = grad.iter().map(|g| g.abs()).sum();
        let mut candidate: Vec<f64> = if gnorm > 0.0 {
            delta.iter().zip(&grad).map(|(d, g)| d + step * g / gnorm).collect()
        } else {
            delta.clone()
        };
        candidate = project_l1_ball(&candidate, radius)?;

        let cand_values = x.apply_flows(&flat_plans(shape, &candidate)?)?;
        let s = feasible_fraction(&values, &cand_values);
        if s < 1.0 {
            candidate = delta.iter().zip(&candidate).map(|(d, c)| d + s * (c - d)).collect();
        }
        delta = candidate;
        (current, values) = perturbed_image(x, &delta)?;

        let pred = smoothed_predict(classifier, &current, noise, cfg.predict_samples, cfg.alpha, eval_seed.child(t as u64))?;
        if pred.prediction != Some(label) {
            return Ok(AttackResult {
                success: true,
                iteration: Some(t),
                clean_correct,
                budget: delta.iter().map(|d| d.abs()).sum(),
                oracle_radius: oracle_radius(x, &current)?,
                delta: flat_plans(shape, &delta)?,
            });
        }
    }
    Ok(AttackResult {
        success: false,
        iteration: None,
        clean_correct,
        budget: delta.iter().map(|d| d.abs()).sum(),
        oracle_radius: oracle_radius(x, &current)?,
        delta: flat_plans(shape, &delta)?,
    })
}

/// Accuracy under attack at each budget, plus the per-image results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub radii: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub clean_accuracy: f64,
    pub results: Vec<AttackResult>,
}

/// Attacks every image once with the cap set to the largest radius, then
/// reads off the accuracy at each budget.
pub fn robustness_curve<C: DifferentiableClassifier + ?Sized>(
    classifier: &C,
    dataset: &LabeledDataset,
    noise: &NoiseSpec,
    radii: &[f64],
    cfg: &AttackConfig,
) -> Result<RobustnessCurve> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if radii.is_empty() || radii.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::InvalidArgument("need a nonempty list of radii >= 0".into()));
    }
    let cap = radii.iter().copied().fold(0.0, f64::max);
    let cfg = AttackConfig {
        max_radius: cap,
        ..cfg.clone()
    };
    let seed = SeedStream::new(cfg.seed);
    let results = dataset
        .images()
        .par_iter()
        .zip(dataset.labels())
        .enumerate()
        .map(|(id, (x, &label))| attack_with_seed(classifier, x, label, noise, &cfg, seed.child(id as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(curve_from_results(radii, results))
}

/// Builds the accuracy table from per-image attack results.
pub fn curve_from_results(radii: &[f64], results: Vec<AttackResult>) -> RobustnessCurve {
    let n = results.len().max(1) as f64;
    let accuracy = radii
        .iter()
        .map(|&r| results.iter().filter(|res| !res.broken_at(r)).count() as f64 / n)
        .collect();
    let clean_accuracy = results.iter().filter(|r| r.clean_correct).count() as f64 / n;
    RobustnessCurve {
        radii: radii.to_vec(),
        accuracy,
        clean_accuracy,
        results,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ConstantClassifier, Network};
    use approx::assert_abs_diff_eq;

    #[test]
    fn projection_examples() {
        assert_eq!(project_l1_ball(&[0.2, -0.3], 1.0).unwrap(), vec![0.2, -0.3]);
        assert_eq!(project_l1_ball(&[0.2, -0.3], 0.0).unwrap(), vec![0.0, 0.0]);
        let p = project_l1_ball(&[0.6, -0.6], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], -0.5, epsilon = 1e-15);
        assert!(project_l1_ball(&[1.0], -0.1).is_err());
    }

    #[test]
    fn schedule_grows_and_caps() {
        let cfg = AttackConfig {
            max_radius: 1.0,
            ..AttackConfig::default()
        };
        assert_abs_diff_eq!(cfg.radius_at(0), 0.1);
        assert_abs_diff_eq!(cfg.radius_at(9), 0.1);
        assert_abs_diff_eq!(cfg.radius_at(10), 0.15, epsilon = 1e-15);
        assert_eq!(cfg.radius_at(199), 1.0);
    }

    #[test]
    fn constant_classifier_is_never_broken() {
        let c = ConstantClassifier {
            class: 0,
            num_classes: 2,
            input_len: 4,
        };
        let x: Image = GridImage::point_mass(2, 2, (0, 0)).unwrap().into();
        let cfg = AttackConfig {
            iterations: 5,
            gradient_samples: 4,
            predict_samples: 50,
            max_radius: 0.5,
            ..AttackConfig::default()
        };
        let res = flow_pgd_attack(&c, &x, 0, &NoiseSpec::flow(0.1).unwrap(), &cfg).unwrap();
        assert!(!res.success);
        assert_eq!(res.budget, 0.0);
    }

    #[test]
    fn zero_iterations_checks_clean_image_only() {
        let c = ConstantClassifier {
            class: 1,
            num_classes: 2,
            input_len: 4,
        };
        let x: Image = GridImage::point_mass(2, 2, (0, 0)).unwrap().into();
        let cfg = AttackConfig {
            iterations: 0,
            predict_samples: 50,
            ..AttackConfig::default()
        };
        let noise = NoiseSpec::flow(0.1).unwrap();
        let wrong = flow_pgd_attack(&c, &x, 0, &noise, &cfg).unwrap();
        assert!(wrong.success && wrong.iteration == Some(0));
        let right = flow_pgd_attack(&c, &x, 1, &noise, &cfg).unwrap();
        assert!(!right.success);
    }

    #[test]
    fn threshold_instance_breaks_within_oracle_budget() {
        // Class 0 while the top-left pixel holds more than 0.35 of the mass.
        let shape = ImageShape::gray(2, 2);
        let mut net = Network::zeros(shape, 0, 2);
        net.input_scale = 1.0;
        net.layers[0].weights[(0, 0)] = 200.0;
        net.layers[0].bias[0] = -70.0;
        let x: Image = GridImage::new(ndarray::array![[0.4, 0.2], [0.2, 0.2]]).unwrap().into();
        let noise = NoiseSpec::flow(0.002).unwrap();
        let cfg = AttackConfig {
            iterations: 60,
            gradient_samples: 16,
            predict_samples: 200,
            max_radius: 0.5,
            seed: 3,
            ..AttackConfig::default()
        };
        let res = flow_pgd_attack(&net, &x, 0, &noise, &cfg).unwrap();
        assert!(res.clean_correct);
        assert!(res.success);
        assert!(res.budget < 0.15, "budget {}", res.budget);
        let oracle = res.oracle_radius.unwrap();
        assert!(oracle >= 0.05 - 0.01 && oracle <= res.budget + 1e-8, "oracle {oracle}");
        let moved = x.with_flows(&res.delta).unwrap();
        assert!(moved.flatten().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn feasible_fraction_keeps_nonnegative() {
        let s = feasible_fraction(&[0.5, 0.5], &[1.5, -0.5]);
        assert_abs_diff_eq!(s, 0.5);
        assert_eq!(feasible_fraction(&[0.5, 0.5], &[0.2, 0.8]), 1.0);
    }
}
