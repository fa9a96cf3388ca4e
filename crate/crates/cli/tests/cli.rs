use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use wsmooth::dataset::{write_idx, IdxData};

fn wsmooth(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsmooth"))
        .current_dir(dir)
        .env_remove("WSMOOTH_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = wsmooth(dir, args);
    assert!(
        out.status.success(),
        "wsmooth {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Rows of a CSV written by the tool, keyed by column name.
fn rows(path: &Path) -> (String, Vec<Vec<(String, String)>>) {
    let text = fs::read_to_string(path).unwrap();
    let (meta, body) = text.split_once('\n').unwrap();
    let mut lines = body.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect())
        .collect();
    (meta.to_string(), rows)
}

fn field<'a>(row: &'a [(String, String)], key: &str) -> &'a str {
    &row.iter().find(|(k, _)| k == key).unwrap().1
}

/// Ten random 6x6 images that all carry label 0.
fn uniform_label_idx(dir: &Path) -> (PathBuf, PathBuf) {
    let images = (0..10u32)
        .map(|i| (0..36u32).map(|p| ((p * 37 + i * 11) % 251) as u8 + 1).collect())
        .collect();
    let data = IdxData {
        rows: 6,
        cols: 6,
        images,
        labels: vec![0; 10],
    };
    let (ip, lp) = (dir.join("images.idx"), dir.join("labels.idx"));
    write_idx(&data, &ip, &lp).unwrap();
    (ip, lp)
}

const CORNERS: [&str; 8] = ["--synthetic", "corners", "--size", "12", "--height", "5", "--width", "5"];

fn train_small(dir: &Path) {
    let mut args = vec!["train", "--epochs", "5", "--lr", "0.001", "--hidden", "0", "--sigma", "0.05", "--out-dir", "m"];
    args.extend(CORNERS);
    ok(dir, &args);
}

#[test]
fn constant_classifier_gets_one_common_certificate() {
    let tmp = TempDir::new().unwrap();
    let (ip, lp) = uniform_label_idx(tmp.path());
    let (n, alpha, sigma) = (2000u64, 0.05f64, 0.05f64);
    ok(
        tmp.path(),
        &[
            "certify",
            "--idx-images",
            ip.to_str().unwrap(),
            "--idx-labels",
            lp.to_str().unwrap(),
            "--model",
            "constant:0",
            "--sigma",
            "0.05",
            "--n0",
            "100",
            "--n",
            "2000",
            "--out-dir",
            "c",
        ],
    );
    let (meta, rows) = rows(&tmp.path().join("c/certify.csv"));
    assert!(meta.starts_with("# master_seed=0 "), "{meta}");
    assert_eq!(rows.len(), 10);

    let p = alpha.powf(1.0 / n as f64);
    let expected = 0.25 * sigma * (p / (1.0 - p)).ln();
    for row in &rows {
        assert_eq!(field(row, "prediction"), "0");
        assert_eq!(field(row, "abstained"), "false");
        assert_eq!(field(row, "p_lb"), field(&rows[0], "p_lb"));
        assert_eq!(field(row, "radius"), field(&rows[0], "radius"));
    }
    let p_lb: f64 = field(&rows[0], "p_lb").parse().unwrap();
    let radius: f64 = field(&rows[0], "radius").parse().unwrap();
    assert!((p_lb - p).abs() < 1e-12, "{p_lb} vs {p}");
    assert!((radius - expected).abs() < 1e-12 * expected, "{radius} vs {expected}");

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("c/certify_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["median_radius"].as_f64(), Some(radius));
    assert_eq!(summary["accuracy"].as_f64(), Some(1.0));
}

#[test]
fn repeated_runs_are_byte_identical_across_worker_counts() {
    let tmp = TempDir::new().unwrap();
    train_small(tmp.path());
    let first = fs::read(tmp.path().join("m/model.json")).unwrap();
    train_small(tmp.path());
    assert_eq!(first, fs::read(tmp.path().join("m/model.json")).unwrap());

    for (workers, out) in [("1", "a"), ("3", "b")] {
        let mut args = vec!["certify", "--model", "m/model.json", "--n0", "50", "--n", "300", "--sigma", "0.05"];
        args.extend(["--workers", workers, "--out-dir", out]);
        args.extend(CORNERS);
        ok(tmp.path(), &args);
        let mut args = vec!["attack", "--model", "m/model.json", "--sigma", "0.05", "--limit", "3"];
        args.extend(["--radii", "0,0.05", "--iterations", "4", "--predict-samples", "100", "--gradient-samples", "16"]);
        args.extend(["--workers", workers, "--out-dir", out]);
        args.extend(CORNERS);
        ok(tmp.path(), &args);
    }
    for file in ["certify.csv", "certify_summary.json", "attack_curve.csv", "attack_images.csv"] {
        let a = fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between worker counts");
    }
}

#[test]
fn summary_statistics_match_the_rows() {
    let tmp = TempDir::new().unwrap();
    train_small(tmp.path());
    let mut args = vec!["certify", "--model", "m/model.json", "--n0", "50", "--n", "400", "--sigma", "0.02", "--out-dir", "c"];
    args.extend(CORNERS);
    ok(tmp.path(), &args);

    let (_, rows) = rows(&tmp.path().join("c/certify.csv"));
    let total = rows.len();
    let correct: Vec<&Vec<(String, String)>> = rows
        .iter()
        .filter(|r| field(r, "prediction") == field(r, "label"))
        .collect();
    let abstained = rows.iter().filter(|r| field(r, "abstained") == "true").count();
    let mut radii: Vec<f64> = correct.iter().map(|r| field(r, "radius").parse().unwrap()).collect();
    radii.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let half = total.div_ceil(2);
    let median = (radii.len() >= half).then(|| radii[half - 1]);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("c/certify_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["images"].as_u64(), Some(total as u64));
    assert_eq!(summary["accuracy"].as_f64(), Some(correct.len() as f64 / total as f64));
    assert_eq!(summary["abstain_rate"].as_f64(), Some(abstained as f64 / total as f64));
    assert_eq!(summary["median_radius"].as_f64(), median);
    assert_eq!(summary["median_certified"].as_bool(), Some(median.is_some()));
}

#[test]
fn oracle_check_passes() {
    let tmp = TempDir::new().unwrap();
    let stdout = ok(tmp.path(), &["oracle-check", "--pairs", "60", "--seed", "3"]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 10);
    assert!(lines.iter().all(|l| l.starts_with("PASS ")), "{stdout}");
}

#[test]
fn report_shows_sqrt2_ratio_between_schemes() {
    let tmp = TempDir::new().unwrap();
    for scheme in ["flow", "pixel"] {
        let mut args = vec!["certify", "--model", "constant:1", "--n0", "50", "--n", "200", "--sigma", "0.03"];
        args.extend(["--scheme", scheme, "--out-dir", scheme]);
        args.extend(CORNERS);
        ok(tmp.path(), &args);
    }
    ok(tmp.path(), &["report", "flow/certify.csv", "pixel/certify.csv", "--out-dir", "r"]);
    let (meta, rows) = rows(&tmp.path().join("r/report.csv"));
    assert_eq!(meta, "# master_seeds=0,0");
    let per: Vec<f64> = rows.iter().map(|r| field(r, "radius_per_log_odds").parse().unwrap()).collect();
    assert_eq!([field(&rows[0], "scheme"), field(&rows[1], "scheme")], ["flow", "pixel"]);
    assert!((per[0] / per[1] - std::f64::consts::SQRT_2).abs() < 1e-12, "{per:?}");
}

#[test]
fn invalid_input_fails_with_a_message() {
    let tmp = TempDir::new().unwrap();
    let mut no_model = vec!["certify"];
    no_model.extend(CORNERS);
    let zero_sigma = {
        let mut a = vec!["certify", "--model", "constant:0", "--sigma", "0"];
        a.extend(CORNERS);
        a
    };
    let bad_class = {
        let mut a = vec!["certify", "--model", "constant:9"];
        a.extend(CORNERS);
        a
    };
    for (args, needle) in [
        (no_model, "no model"),
        (zero_sigma, "sigma must be > 0"),
        (bad_class, "outside"),
        (vec!["certify", "--model", "constant:0"], "data source"),
    ] {
        let out = wsmooth(tmp.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needle), "{args:?}: {err}");
    }
}

#[test]
fn config_file_and_flags_combine() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("run.toml"),
        "seed = 5\nmodel = \"constant:0\"\n[data]\nsynthetic = \"bars\"\nsize = 4\nheight = 5\nwidth = 5\n[certify]\nn0 = 20\nn = 100\n",
    )
    .unwrap();
    ok(tmp.path(), &["certify", "--config", "run.toml", "--seed", "6", "--out-dir", "c"]);
    let (meta, rows) = rows(&tmp.path().join("c/certify.csv"));
    assert!(meta.starts_with("# master_seed=6 scheme=flow sigma=0.05 n0=20 n=100"), "{meta}");
    assert_eq!(rows.len(), 4);
}
