use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use wsmooth::attack::AttackConfig;
use wsmooth::certify::CertifyParams;
use wsmooth::classifier::{LrStep, NoiseMode, TrainConfig};
use wsmooth::dataset::SyntheticKind;
use wsmooth::noise::{NoiseSpec, Scheme};

/// Everything a run needs. Loaded from TOML; command-line flags override it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub out_dir: PathBuf,
    /// Checkpoint path or `constant:<class>`.
    pub model: Option<String>,
    pub data: DataConfig,
    pub noise: NoiseConfig,
    pub train: TrainSection,
    pub certify: CertifyParams,
    pub attack: AttackSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 0,
            out_dir: PathBuf::from("wsmooth-out"),
            model: None,
            data: DataConfig::default(),
            noise: NoiseConfig::default(),
            train: TrainSection::default(),
            certify: CertifyParams::default(),
            attack: AttackSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticKind>,
    pub size: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data_seed: u64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub num_classes: usize,
    /// Keep only the first `limit` images.
    pub limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: None,
            size: 100,
            height: 12,
            width: 12,
            channels: 1,
            data_seed: 0,
            idx_images: None,
            idx_labels: None,
            num_classes: 10,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub scheme: Scheme,
    pub sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            scheme: Scheme::WassersteinFlow,
            sigma: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Extra `[epoch, rate]` steps applied after the initial rate.
    pub lr_steps: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    /// Training noise; defaults to the scheme in `[noise]`.
    pub noise_mode: Option<NoiseMode>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            epochs: base.epochs,
            batch_size: base.batch_size,
            learning_rate: base.learning_rate(0),
            lr_steps: Vec::new(),
            momentum: base.momentum,
            weight_decay: base.weight_decay,
            hidden: base.hidden,
            noise_mode: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub radii: Vec<f64>,
    pub iterations: usize,
    pub gradient_samples: u64,
    pub initial_radius: Option<f64>,
    pub growth_factor: f64,
    pub growth_interval: usize,
    pub step_size: f64,
    /// Draws for each hard prediction; defaults to `certify.n`.
    pub predict_samples: Option<u64>,
}

impl Default for AttackSection {
    fn default() -> Self {
        let base = AttackConfig::default();
        AttackSection {
            radii: vec![0.0, 0.02, 0.05, 0.1, 0.2],
            iterations: base.iterations,
            gradient_samples: base.gradient_samples,
            initial_radius: None,
            growth_factor: base.growth_factor,
            growth_interval: base.growth_interval,
            step_size: base.step_size,
            predict_samples: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn noise(&self) -> Result<NoiseSpec> {
        Ok(NoiseSpec::new(self.noise.scheme, self.noise.sigma)?)
    }

    /// Noise for commands whose output depends on a positive sigma.
    pub fn positive_noise(&self) -> Result<NoiseSpec> {
        if !(self.noise.sigma > 0.0) {
            bail!("sigma must be > 0 for this command, got {}", self.noise.sigma);
        }
        self.noise()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let mut lr_schedule = vec![LrStep {
            from_epoch: 0,
            rate: t.learning_rate,
        }];
        lr_schedule.extend(t.lr_steps.iter().map(|&(from_epoch, rate)| LrStep { from_epoch, rate }));
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_schedule,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            sigma: self.noise.sigma,
            hidden: t.hidden,
            seed: self.seed,
        }
    }

    pub fn noise_mode(&self) -> NoiseMode {
        self.train.noise_mode.unwrap_or(match self.noise.scheme {
            Scheme::WassersteinFlow => NoiseMode::Flow,
            Scheme::LaplacePixel => NoiseMode::Pixel,
        })
    }

    pub fn attack_config(&self) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            iterations: a.iterations,
            gradient_samples: a.gradient_samples,
            max_radius: a.radii.iter().copied().fold(0.0, f64::max),
            initial_radius: a.initial_radius,
            growth_factor: a.growth_factor,
            growth_interval: a.growth_interval,
            step_size: a.step_size,
            predict_samples: a.predict_samples.unwrap_or(self.certify.n),
            alpha: self.certify.alpha,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn sections_parse() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 4
            model = "constant:1"
            [data]
            synthetic = "bars"
            size = 10
            [noise]
            scheme = "pixel"
            sigma = 0.01
            [certify]
            n = 500
            [attack]
            radii = [0.0, 0.1]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.data.synthetic, Some(SyntheticKind::Bars));
        assert_eq!(cfg.noise.scheme, Scheme::LaplacePixel);
        assert_eq!(cfg.certify.n, 500);
        assert_eq!(cfg.certify.n0, 1000);
        assert_eq!(cfg.attack_config().max_radius, 0.1);
        assert_eq!(cfg.attack_config().predict_samples, 500);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sigma = 0.1").is_err());
    }
}
