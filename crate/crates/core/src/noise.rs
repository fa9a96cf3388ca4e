//! Laplace noise in the flow domain and in pixel space.
//!
//! `sigma` is always the per-coordinate standard deviation. The Laplace scale
//! is therefore `b = sigma / sqrt(2)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::flow::{Image, ImageShape, LocalFlowPlan};
use crate::{Error, Result};

/// Where smoothing noise is added.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// Laplace noise on every local flow coordinate (Wasserstein smoothing).
    #[serde(rename = "flow", alias = "wasserstein_flow")]
    WassersteinFlow,
    /// Laplace noise on every pixel (baseline).
    #[serde(rename = "pixel", alias = "laplace_pixel", alias = "laplace")]
    LaplacePixel,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::WassersteinFlow => "flow",
            Scheme::LaplacePixel => "pixel",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" | "wasserstein" | "wasserstein_flow" => Ok(Scheme::WassersteinFlow),
            "pixel" | "laplace" | "laplace_pixel" => Ok(Scheme::LaplacePixel),
            other => Err(Error::InvalidArgument(format!("unknown scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub scheme: Scheme,
    pub sigma: f64,
}

impl NoiseSpec {
    /// `sigma = 0` is accepted and yields noiseless evaluation; certified
    /// radii then degenerate to zero.
    pub fn new(scheme: Scheme, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(NoiseSpec { scheme, sigma })
    }

    pub fn flow(sigma: f64) -> Result<Self> {
        Self::new(Scheme::WassersteinFlow, sigma)
    }

    pub fn pixel(sigma: f64) -> Result<Self> {
        Self::new(Scheme::LaplacePixel, sigma)
    }

    pub fn sample<R: Rng + ?Sized>(&self, shape: ImageShape, rng: &mut R) -> Noise {
        match self.scheme {
            Scheme::WassersteinFlow => Noise::Flow(sample_flow_noise(shape, self.sigma, rng)),
            Scheme::LaplacePixel => Noise::Pixel(sample_pixel_noise(shape, self.sigma, rng)),
        }
    }

    /// Flattened noised input, equal to `perturb(x, &self.sample(shape, rng))`
    /// for the same generator state but without materializing the noise.
    pub fn noised_input<R: Rng + ?Sized>(&self, x: &Image, rng: &mut R) -> Vec<f64> {
        let mut out = x.flatten();
        self.add_noise_in_place(x.shape(), &mut out, rng);
        out
    }

    /// Adds one noise draw to an already flattened input.
    pub fn add_noise_in_place<R: Rng + ?Sized>(&self, shape: ImageShape, buf: &mut [f64], rng: &mut R) {
        let b = laplace_scale(self.sigma);
        match self.scheme {
            Scheme::LaplacePixel => {
                for v in buf.iter_mut() {
                    *v += sample_laplace(b, rng);
                }
            }
            Scheme::WassersteinFlow => {
                let (n, m) = (shape.height, shape.width);
                for channel in buf.chunks_mut(shape.pixels()) {
                    for i in 0..n.saturating_sub(1) {
                        for j in 0..m {
                            let f = sample_laplace(b, rng);
                            channel[i * m + j] -= f;
                            channel[(i + 1) * m + j] += f;
                        }
                    }
                    for i in 0..n {
                        for j in 0..m.saturating_sub(1) {
                            let f = sample_laplace(b, rng);
                            channel[i * m + j] -= f;
                            channel[i * m + j + 1] += f;
                        }
                    }
                }
            }
        }
    }
}

/// One noise draw, shaped for its scheme.
#[derive(Clone, Debug, PartialEq)]
pub enum Noise {
    /// One flow plan per channel.
    Flow(Vec<LocalFlowPlan>),
    /// Flattened, channel-major pixel noise.
    Pixel(Vec<f64>),
}

/// Laplace scale parameter for a given standard deviation.
pub fn laplace_scale(sigma: f64) -> f64 {
    sigma / std::f64::consts::SQRT_2
}

/// One draw from `Laplace(0, b)` by inversion.
///
/// The generator advances by one draw for every `b`, including zero.
pub fn sample_laplace<R: Rng + ?Sized>(b: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    // u in [-0.5, 0.5); 1 - 2|u| lies in (0, 1].
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// I.i.d. Laplace flow noise with standard deviation `sigma`, one plan per channel.
pub fn sample_flow_noise<R: Rng + ?Sized>(shape: ImageShape, sigma: f64, rng: &mut R) -> Vec<LocalFlowPlan> {
    let b = laplace_scale(sigma);
    (0..shape.channels)
        .map(|_| {
            let mut plan = LocalFlowPlan::zeros(shape.height, shape.width);
            for v in plan.iter_mut() {
                *v = sample_laplace(b, rng);
            }
            plan
        })
        .collect()
}

pub fn sample_pixel_noise<R: Rng + ?Sized>(shape: ImageShape, sigma: f64, rng: &mut R) -> Vec<f64> {
    let b = laplace_scale(sigma);
    (0..shape.input_len()).map(|_| sample_laplace(b, rng)).collect()
}

/// Applies a noise draw to an image, returning the flattened classifier input.
///
/// Flow noise conserves each channel's mass; pixel noise does not.
pub fn perturb(x: &Image, noise: &Noise) -> Result<Vec<f64>> {
    match noise {
        Noise::Flow(plans) => x.apply_flows(plans),
        Noise::Pixel(eps) => {
            let mut out = x.flatten();
            if eps.len() != out.len() {
                return Err(Error::dims(out.len(), eps.len()));
            }
            out.iter_mut().zip(eps).for_each(|(o, e)| *o += e);
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::GridImage;
    use crate::rng::SeedStream;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn image() -> Image {
        GridImage::new(array![[0.1, 0.2, 0.0], [0.3, 0.1, 0.3]]).unwrap().into()
    }

    #[test]
    fn zero_sigma_gives_zero_plan() {
        let mut rng = SeedStream::new(1).rng();
        let plans = sample_flow_noise(ImageShape::gray(3, 4), 0.0, &mut rng);
        assert_eq!(plans, vec![LocalFlowPlan::zeros(3, 4)]);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let a = sample_flow_noise(ImageShape::gray(3, 3), 0.5, &mut SeedStream::new(9).rng());
        let b = sample_flow_noise(ImageShape::gray(3, 3), 0.5, &mut SeedStream::new(9).rng());
        assert_eq!(a, b);
    }

    #[test]
    fn multichannel_plans_are_independent() {
        let shape = ImageShape {
            channels: 3,
            height: 2,
            width: 2,
        };
        let plans = sample_flow_noise(shape, 1.0, &mut SeedStream::new(2).rng());
        assert_eq!(plans.len(), 3);
        assert_ne!(plans[0], plans[1]);
    }

    #[test]
    fn laplace_moments() {
        let sigma = 0.7;
        let b = laplace_scale(sigma);
        let mut rng = SeedStream::new(3).rng();
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let v = sample_laplace(b, &mut rng);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let sd = (s2 / n as f64 - mean * mean).sqrt();
        assert!((sd / sigma - 1.0).abs() < 0.01, "sd {sd}");
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn perturb_examples() {
        let x = image();
        let zero_flow = Noise::Flow(vec![LocalFlowPlan::zeros(2, 3)]);
        assert_eq!(perturb(&x, &zero_flow).unwrap(), x.flatten());

        let noise = NoiseSpec::flow(0.3).unwrap().sample(x.shape(), &mut SeedStream::new(4).rng());
        let out = perturb(&x, &noise).unwrap();
        assert_abs_diff_eq!(out.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        let zeros: Image = GridImage::new(array![[0.25, 0.25], [0.25, 0.25]]).unwrap().into();
        let eps = vec![0.1, -0.2, 0.3, 0.05];
        let out = perturb(&zeros, &Noise::Pixel(eps.clone())).unwrap();
        for ((o, e), base) in out.iter().zip(&eps).zip(zeros.flatten()) {
            assert_abs_diff_eq!(o - base, *e, epsilon = 1e-15);
        }
    }

    #[test]
    fn fast_path_matches_materialized_noise() {
        let x = image();
        for spec in [NoiseSpec::flow(0.2).unwrap(), NoiseSpec::pixel(0.2).unwrap()] {
            let fast = spec.noised_input(&x, &mut SeedStream::new(5).rng());
            let noise = spec.sample(x.shape(), &mut SeedStream::new(5).rng());
            let slow = perturb(&x, &noise).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn rejects_negative_sigma() {
        assert!(NoiseSpec::flow(-0.1).is_err());
        assert!(NoiseSpec::pixel(f64::NAN).is_err());
    }
}
