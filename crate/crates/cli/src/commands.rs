use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use wsmooth::attack::robustness_curve;
use wsmooth::certify::{
    certify_dataset, radius_constant, smoothed_predict, summarize, Certificate, CertificationRecord,
    CertificationSummary, MedianRadius,
};
use wsmooth::classifier::{accuracy, train};
use wsmooth::dataset::{load_idx, synthetic_dataset, LabeledDataset, SyntheticSpec};
use wsmooth::noise::Scheme;
use wsmooth::rng::{phase, SeedStream};
use wsmooth::selfcheck::run_oracle_suite;
use wsmooth::transport::GroundMetric;

use crate::config::RunConfig;
use crate::model::Model;

pub const CERTIFY_HEADER: [&str; 7] = ["id", "label", "prediction", "p_lb", "radius", "abstained", "votes"];
pub const PREDICT_HEADER: [&str; 7] = ["id", "label", "prediction", "top_count", "runner_up_count", "p_value", "abstained"];
pub const CURVE_HEADER: [&str; 2] = ["radius", "accuracy"];
pub const ATTACK_HEADER: [&str; 7] = ["id", "label", "clean_correct", "success", "iteration", "budget", "oracle_radius"];
pub const REPORT_HEADER: [&str; 9] = [
    "source",
    "scheme",
    "sigma",
    "images",
    "accuracy",
    "abstain_rate",
    "median_radius",
    "radius_per_log_odds",
    "master_seed",
];

/// A dataset plus the original index of each image.
pub struct Data {
    pub set: LabeledDataset,
    pub ids: Vec<usize>,
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let d = &cfg.data;
    let (set, ids) = match (d.synthetic, &d.idx_images, &d.idx_labels) {
        (Some(kind), None, None) => {
            let set = synthetic_dataset(&SyntheticSpec {
                kind,
                size: d.size,
                height: d.height,
                width: d.width,
                channels: d.channels,
                seed: d.data_seed,
            })?;
            let ids: Vec<usize> = (0..set.len()).collect();
            (set, ids)
        }
        (None, Some(images), Some(labels)) => {
            let mut idx = load_idx(images, labels)?;
            if let Some(limit) = d.limit {
                idx.images.truncate(limit);
                idx.labels.truncate(limit);
            }
            let (set, skipped) = idx.normalize(d.num_classes)?;
            if !skipped.is_empty() {
                eprintln!("skipped {} zero-mass images: {:?}", skipped.len(), skipped);
            }
            let ids: Vec<usize> = (0..idx.images.len()).filter(|i| !skipped.contains(i)).collect();
            (set, ids)
        }
        _ => bail!("configure exactly one data source: data.synthetic, or data.idx_images with data.idx_labels"),
    };
    if set.is_empty() {
        bail!("the dataset is empty");
    }
    let keep = d.limit.unwrap_or(set.len()).min(set.len());
    Ok(Data {
        set: set.take(keep),
        ids: ids.into_iter().take(keep).collect(),
    })
}

fn model(cfg: &RunConfig, data: &Data) -> Result<Model> {
    let spec = cfg.model.as_deref().context("no model given: pass --model <checkpoint> or --model constant:<class>")?;
    Model::resolve(spec, data.set.shape(), data.set.num_classes())
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(cfg.out_dir.join(name))
}

/// CSV writer whose first line records the run metadata.
fn csv_writer(path: &Path, meta: &[(&str, String)], header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let mut file = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let line: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(file, "# {}", line.join(" "))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    Ok(w)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Shortest round-trip form, with an exponent for very small or large values.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

fn noise_meta(cfg: &RunConfig) -> Vec<(&'static str, String)> {
    vec![
        ("master_seed", cfg.seed.to_string()),
        ("scheme", cfg.noise.scheme.to_string()),
        ("sigma", cfg.noise.sigma.to_string()),
    ]
}

#[derive(Serialize)]
struct TrainSummary {
    master_seed: u64,
    noise_mode: wsmooth::classifier::NoiseMode,
    sigma: f64,
    epochs: usize,
    final_loss: f64,
    train_accuracy: f64,
    checkpoint: PathBuf,
}

pub fn run_train(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let train_cfg = cfg.train_config();
    let mode = cfg.noise_mode();
    let (net, report) = train(&data.set, &train_cfg, mode)?;
    let checkpoint = out_path(cfg, "model.json")?;
    net.save(&checkpoint, Some(&train_cfg))?;

    let mut log = csv_writer(&out_path(cfg, "train_log.csv")?, &[("master_seed", cfg.seed.to_string())], &["epoch", "loss"])?;
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        log.write_record([epoch.to_string(), num(*loss)])?;
    }
    log.flush()?;

    let summary = TrainSummary {
        master_seed: cfg.seed,
        noise_mode: mode,
        sigma: train_cfg.sigma,
        epochs: train_cfg.epochs,
        final_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        train_accuracy: accuracy(&net, &data.set),
        checkpoint: checkpoint.clone(),
    };
    write_json(&out_path(cfg, "train_summary.json")?, &summary)?;
    println!(
        "trained {} epochs on {} images: final loss {:.4}, clean train accuracy {:.4}; checkpoint {}",
        summary.epochs,
        data.set.len(),
        summary.final_loss,
        summary.train_accuracy,
        checkpoint.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct CertifySummaryFile {
    master_seed: u64,
    scheme: Scheme,
    sigma: f64,
    n0: u64,
    n: u64,
    alpha: f64,
    images: usize,
    accuracy: f64,
    abstain_rate: f64,
    median_radius: Option<f64>,
    median_certified: bool,
}

fn certify_summary_file(cfg: &RunConfig, s: &CertificationSummary) -> CertifySummaryFile {
    CertifySummaryFile {
        master_seed: cfg.seed,
        scheme: cfg.noise.scheme,
        sigma: cfg.noise.sigma,
        n0: cfg.certify.n0,
        n: cfg.certify.n,
        alpha: cfg.certify.alpha,
        images: s.images,
        accuracy: s.accuracy,
        abstain_rate: s.abstain_rate,
        median_radius: s.median_radius.value(),
        median_certified: matches!(s.median_radius, MedianRadius::Radius(_)),
    }
}

fn print_certify_summary(s: &CertificationSummary) {
    let median = match s.median_radius {
        MedianRadius::Radius(r) => format!("{r:.6}"),
        MedianRadius::NotCertified => "not certified".into(),
    };
    println!(
        "certified {} images: accuracy {:.4}, abstain rate {:.4}, median certified radius {median}",
        s.images, s.accuracy, s.abstain_rate
    );
}

pub fn run_certify(cfg: &RunConfig) -> Result<()> {
    let noise = cfg.positive_noise()?;
    let data = load_data(cfg)?;
    let model = model(cfg, &data)?;
    let records = certify_dataset(&model, &data.set, &noise, &cfg.certify, SeedStream::new(cfg.seed))?;

    let mut meta = noise_meta(cfg);
    meta.extend([
        ("n0", cfg.certify.n0.to_string()),
        ("n", cfg.certify.n.to_string()),
        ("alpha", cfg.certify.alpha.to_string()),
    ]);
    let mut w = csv_writer(&out_path(cfg, "certify.csv")?, &meta, &CERTIFY_HEADER)?;
    for r in &records {
        let c = &r.certificate;
        w.write_record([
            data.ids[r.id].to_string(),
            r.label.to_string(),
            opt(c.prediction),
            num(c.p_lower),
            opt_num(c.radius),
            c.prediction.is_none().to_string(),
            c.votes.to_string(),
        ])?;
    }
    w.flush()?;
    let summary = summarize(&records)?;
    write_json(&out_path(cfg, "certify_summary.json")?, &certify_summary_file(cfg, &summary))?;
    print_certify_summary(&summary);
    Ok(())
}

#[derive(Serialize)]
struct PredictSummary {
    master_seed: u64,
    scheme: Scheme,
    sigma: f64,
    n: u64,
    alpha: f64,
    images: usize,
    accuracy: f64,
    abstain_rate: f64,
}

pub fn run_predict(cfg: &RunConfig) -> Result<()> {
    let noise = cfg.noise()?;
    let data = load_data(cfg)?;
    let model = model(cfg, &data)?;
    let seed = SeedStream::new(cfg.seed).child(phase::PREDICT);

    let mut meta = noise_meta(cfg);
    meta.extend([("n", cfg.certify.n.to_string()), ("alpha", cfg.certify.alpha.to_string())]);
    let mut w = csv_writer(&out_path(cfg, "predict.csv")?, &meta, &PREDICT_HEADER)?;
    let (mut correct, mut abstained) = (0usize, 0usize);
    for (pos, (x, &label)) in data.set.images().iter().zip(data.set.labels()).enumerate() {
        let p = smoothed_predict(&model, x, &noise, cfg.certify.n, cfg.certify.alpha, seed.child(pos as u64))?;
        correct += usize::from(p.prediction == Some(label));
        abstained += usize::from(p.prediction.is_none());
        w.write_record([
            data.ids[pos].to_string(),
            label.to_string(),
            opt(p.prediction),
            p.top_count.to_string(),
            p.runner_up_count.to_string(),
            num(p.p_value),
            p.prediction.is_none().to_string(),
        ])?;
    }
    w.flush()?;
    let images = data.set.len();
    let summary = PredictSummary {
        master_seed: cfg.seed,
        scheme: cfg.noise.scheme,
        sigma: cfg.noise.sigma,
        n: cfg.certify.n,
        alpha: cfg.certify.alpha,
        images,
        accuracy: correct as f64 / images as f64,
        abstain_rate: abstained as f64 / images as f64,
    };
    write_json(&out_path(cfg, "predict_summary.json")?, &summary)?;
    println!(
        "predicted {images} images: accuracy {:.4}, abstain rate {:.4}",
        summary.accuracy, summary.abstain_rate
    );
    Ok(())
}

#[derive(Serialize)]
struct AttackSummary {
    master_seed: u64,
    scheme: Scheme,
    sigma: f64,
    config: wsmooth::attack::AttackConfig,
    radii: Vec<f64>,
    accuracy: Vec<f64>,
    clean_accuracy: f64,
    note: &'static str,
}

const ATTACK_NOTE: &str = "the smoothed prediction is re-evaluated after every step and abstentions count as \
misclassifications; accuracies are a lower bound on robustness to this attack";

pub fn run_attack(cfg: &RunConfig) -> Result<()> {
    let noise = cfg.positive_noise()?;
    let data = load_data(cfg)?;
    let model = model(cfg, &data)?;
    let attack_cfg = cfg.attack_config();
    let curve = robustness_curve(&model, &data.set, &noise, &cfg.attack.radii, &attack_cfg)?;

    let meta = noise_meta(cfg);
    let mut w = csv_writer(&out_path(cfg, "attack_curve.csv")?, &meta, &CURVE_HEADER)?;
    for (r, a) in curve.radii.iter().zip(&curve.accuracy) {
        w.write_record([num(*r), num(*a)])?;
    }
    w.flush()?;
    let mut w = csv_writer(&out_path(cfg, "attack_images.csv")?, &meta, &ATTACK_HEADER)?;
    for (pos, res) in curve.results.iter().enumerate() {
        w.write_record([
            data.ids[pos].to_string(),
            data.set.labels()[pos].to_string(),
            res.clean_correct.to_string(),
            res.success.to_string(),
            opt(res.iteration),
            num(res.budget),
            opt_num(res.oracle_radius),
        ])?;
    }
    w.flush()?;
    write_json(
        &out_path(cfg, "attack_summary.json")?,
        &AttackSummary {
            master_seed: cfg.seed,
            scheme: cfg.noise.scheme,
            sigma: cfg.noise.sigma,
            config: attack_cfg,
            radii: curve.radii.clone(),
            accuracy: curve.accuracy.clone(),
            clean_accuracy: curve.clean_accuracy,
            note: ATTACK_NOTE,
        },
    )?;
    println!("accuracy under attack ({ATTACK_NOTE}):");
    for (r, a) in curve.radii.iter().zip(&curve.accuracy) {
        println!("  radius {r:<10} accuracy {a:.4}");
    }
    Ok(())
}

/// Returns whether every check passed.
pub fn run_oracle_check(cfg: &RunConfig, pairs: usize) -> Result<bool> {
    let results = run_oracle_suite(cfg.seed, pairs)?;
    let mut all = true;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        all &= r.passed();
        println!(
            "{verdict} {:<28} cases={:<4} max_residual={:.3e} tolerance={:.0e}",
            r.name, r.cases, r.max_residual, r.tolerance
        );
    }
    Ok(all)
}

/// Rows of a certification CSV together with its metadata line.
pub struct CertifyTable {
    pub meta: BTreeMap<String, String>,
    pub records: Vec<CertificationRecord>,
}

fn meta_value<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<T> {
    meta.get(key)
        .with_context(|| format!("{} lacks {key} in its header line", path.display()))?
        .parse()
        .map_err(|_| anyhow::anyhow!("{} has an unparsable {key}", path.display()))
}

pub fn read_certify_csv(path: &Path) -> Result<CertifyTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let meta: BTreeMap<String, String> = first
        .strip_prefix("# ")
        .with_context(|| format!("{} does not start with a metadata line", path.display()))?
        .split_whitespace()
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let scheme: Scheme = meta_value(&meta, "scheme", path)?;
    let sigma: f64 = meta_value(&meta, "sigma", path)?;
    let n0: u64 = meta_value(&meta, "n0", path)?;
    let n: u64 = meta_value(&meta, "n", path)?;
    let alpha: f64 = meta_value(&meta, "alpha", path)?;

    let mut reader = csv::Reader::from_reader(rest.as_bytes());
    if reader.headers()?.iter().ne(CERTIFY_HEADER) {
        bail!("{} does not have the certification columns {:?}", path.display(), CERTIFY_HEADER);
    }
    let parse_opt = |s: &str| -> Result<Option<String>> { Ok((!s.is_empty()).then(|| s.to_string())) };
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let id: usize = row[0].parse()?;
        let label: usize = row[1].parse()?;
        let prediction = parse_opt(&row[2])?.map(|s| s.parse::<usize>()).transpose()?;
        let p_lower: f64 = row[3].parse()?;
        let radius = parse_opt(&row[4])?.map(|s| s.parse::<f64>()).transpose()?;
        let certificate = Certificate {
            prediction,
            votes: row[6].parse()?,
            p_lower,
            radius,
            scheme,
            sigma,
            n0,
            n,
            alpha,
        };
        records.push(CertificationRecord::new(id, label, certificate));
    }
    Ok(CertifyTable { meta, records })
}

pub fn run_report(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    if inputs.is_empty() {
        bail!("report needs at least one certify.csv");
    }
    let mut rows = Vec::new();
    let mut seeds = Vec::new();
    for path in inputs {
        let table = read_certify_csv(path)?;
        let scheme: Scheme = meta_value(&table.meta, "scheme", path)?;
        let sigma: f64 = meta_value(&table.meta, "sigma", path)?;
        let seed = table.meta.get("master_seed").cloned().unwrap_or_default();
        let s = summarize(&table.records)?;
        seeds.push(seed.clone());
        rows.push([
            path.display().to_string(),
            scheme.to_string(),
            sigma.to_string(),
            s.images.to_string(),
            num(s.accuracy),
            num(s.abstain_rate),
            s.median_radius.value().map_or_else(|| "not_certified".into(), num),
            num(radius_constant(scheme, GroundMetric::L2) * sigma),
            seed,
        ]);
    }
    let mut w = csv_writer(&out_path(cfg, "report.csv")?, &[("master_seeds", seeds.join(","))], &REPORT_HEADER)?;
    for row in &rows {
        w.write_record(row)?;
    }
    w.flush()?;

    let widths: Vec<usize> = (0..REPORT_HEADER.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([REPORT_HEADER[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    println!("{}", line(REPORT_HEADER.to_vec()));
    for r in &rows {
        println!("{}", line(r.iter().map(String::as_str).collect()));
    }
    Ok(())
}
