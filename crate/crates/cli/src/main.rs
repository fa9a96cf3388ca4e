//! Command-line front end for Wasserstein smoothing.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod model;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use wsmooth::classifier::NoiseMode;
use wsmooth::dataset::SyntheticKind;
use wsmooth::noise::Scheme;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "wsmooth", version, about = "Certified robustness to Wasserstein perturbations by smoothing")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, env = "WSMOOTH_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Checkpoint path or `constant:<class>`.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Smoothing noise: `flow` or `pixel`.
    #[arg(long, global = true)]
    scheme: Option<Scheme>,
    #[arg(long, global = true)]
    sigma: Option<f64>,
    /// Selection samples.
    #[arg(long, global = true)]
    n0: Option<u64>,
    /// Estimation samples.
    #[arg(long = "n", global = true)]
    n: Option<u64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct DataArgs {
    /// Synthetic family: blobs, bars, corners or rings.
    #[arg(long, global = true)]
    synthetic: Option<SyntheticKind>,
    #[arg(long, global = true)]
    size: Option<usize>,
    #[arg(long, global = true)]
    height: Option<usize>,
    #[arg(long, global = true)]
    width: Option<usize>,
    #[arg(long, global = true)]
    channels: Option<usize>,
    #[arg(long, global = true)]
    data_seed: Option<u64>,
    #[arg(long, global = true)]
    idx_images: Option<PathBuf>,
    #[arg(long, global = true)]
    idx_labels: Option<PathBuf>,
    #[arg(long, global = true)]
    num_classes: Option<usize>,
    /// Keep only the first images.
    #[arg(long, global = true)]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base classifier under smoothing noise.
    Train(TrainArgs),
    /// Certify every image and write radii.
    Certify,
    /// Smoothed prediction with abstention.
    Predict,
    /// Empirical attack on the smoothed classifier.
    Attack(AttackArgs),
    /// Randomized consistency checks of the transport oracles.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        pairs: usize,
    },
    /// Merge certification CSVs into one table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Training noise: flow, pixel or none.
    #[arg(long)]
    noise_mode: Option<String>,
}

#[derive(Args)]
struct AttackArgs {
    /// Comma-separated budgets for the accuracy curve.
    #[arg(long, value_delimiter = ',')]
    radii: Option<Vec<f64>>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    gradient_samples: Option<u64>,
    #[arg(long)]
    predict_samples: Option<u64>,
    #[arg(long)]
    step_size: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, g.seed);
    set(&mut cfg.workers, g.workers);
    set(&mut cfg.out_dir, g.out_dir.clone());
    if g.model.is_some() {
        cfg.model = g.model.clone();
    }
    set(&mut cfg.noise.scheme, g.scheme);
    set(&mut cfg.noise.sigma, g.sigma);
    set(&mut cfg.certify.n0, g.n0);
    set(&mut cfg.certify.n, g.n);
    set(&mut cfg.certify.alpha, g.alpha);

    let d = &g.data;
    if d.synthetic.is_some() {
        cfg.data.synthetic = d.synthetic;
    }
    set(&mut cfg.data.size, d.size);
    set(&mut cfg.data.height, d.height);
    set(&mut cfg.data.width, d.width);
    set(&mut cfg.data.channels, d.channels);
    set(&mut cfg.data.data_seed, d.data_seed);
    if d.idx_images.is_some() {
        cfg.data.idx_images = d.idx_images.clone();
    }
    if d.idx_labels.is_some() {
        cfg.data.idx_labels = d.idx_labels.clone();
    }
    set(&mut cfg.data.num_classes, d.num_classes);
    if d.limit.is_some() {
        cfg.data.limit = d.limit;
    }

    match &cli.command {
        Command::Train(t) => {
            set(&mut cfg.train.epochs, t.epochs);
            set(&mut cfg.train.batch_size, t.batch_size);
            set(&mut cfg.train.learning_rate, t.lr);
            set(&mut cfg.train.hidden, t.hidden);
            if let Some(mode) = &t.noise_mode {
                let mode: NoiseMode = serde_json::from_value(serde_json::Value::String(mode.to_lowercase()))
                    .with_context(|| format!("unknown noise mode {mode:?}; expected flow, pixel or none"))?;
                cfg.train.noise_mode = Some(mode);
            }
        }
        Command::Attack(a) => {
            set(&mut cfg.attack.radii, a.radii.clone());
            set(&mut cfg.attack.iterations, a.iterations);
            set(&mut cfg.attack.gradient_samples, a.gradient_samples);
            if a.predict_samples.is_some() {
                cfg.attack.predict_samples = a.predict_samples;
            }
            set(&mut cfg.attack.step_size, a.step_size);
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = build_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .context("starting the worker pool")?;
    match &cli.command {
        Command::Train(_) => commands::run_train(&cfg)?,
        Command::Certify => commands::run_certify(&cfg)?,
        Command::Predict => commands::run_predict(&cfg)?,
        Command::Attack(_) => commands::run_attack(&cfg)?,
        Command::OracleCheck { pairs } => return commands::run_oracle_check(&cfg, *pairs),
        Command::Report { inputs } => commands::run_report(&cfg, inputs)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
