//! Acceptance harness. Prints one PASS/FAIL/SKIPPED line per criterion and
//! fails if any non-skipped criterion fails.
//!
//! Run with `cargo test -p malaria-cli --test acceptance`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use malaria_cli::manifest::without_timings;
use malaria_cli::{
    commands, compare, evaluate, gradcheck_report, load_data, paramcheck_report, train, RunConfig,
};
use malaria_core::data::{resolve_data_root, split_811};
use malaria_core::metrics::{
    chart_sidecar, confusion_matrix, evaluate_predictions, parse_report_csv, prf, read_chart_csv,
    render_report, roc_auc, PredictionSet, ReportFormat,
};
use malaria_core::train::load_checkpoint;
use malaria_core::zoo::Architecture;
use malaria_core::Error;

enum Outcome {
    Pass(String),
    Fail(String),
    Skipped(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn within(elapsed: Duration, limit_secs: f64) -> bool {
    elapsed.as_secs_f64() < limit_secs
}

fn base_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn parameter_anchors() -> Outcome {
    let t = Instant::now();
    match paramcheck_report(1.0) {
        Ok((_, ok)) => {
            let e = t.elapsed();
            verdict(
                ok && within(e, 10.0),
                format!(
                    "anchors {} in {:.2}s",
                    if ok { "match" } else { "differ" },
                    e.as_secs_f64()
                ),
            )
        }
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn split_arithmetic() -> Outcome {
    let t = Instant::now();
    match split_811(27_558, 7) {
        Ok(s) => {
            let sizes = s.sizes();
            let e = t.elapsed();
            verdict(
                sizes == (22_046, 2_756, 2_756) && within(e, 1.0),
                format!("sizes {sizes:?} in {:.3}s", e.as_secs_f64()),
            )
        }
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let clean = match gradcheck_report(None) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    // a broken dense backward must be caught, and only for dense
    let tamper = |kind: &str, g: &mut malaria_core::layers::NodeGrads<f64>| {
        if kind == "dense" {
            if let Some(w) = g.params.first_mut() {
                w.data_mut()[0] += 0.1;
            }
        }
    };
    let tampered = match gradcheck_report(Some(&tamper)) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let only_dense = tampered
        .0
        .lines()
        .filter(|l| l.ends_with("FAIL"))
        .map(|l| l.split_whitespace().next().unwrap_or(""))
        .collect::<Vec<_>>()
        == ["dense"];
    let e = t.elapsed();
    verdict(
        clean.1 && !tampered.1 && only_dense && within(e, 120.0),
        format!(
            "clean suite {}, tampered dense {} in {:.1}s",
            if clean.1 { "passes" } else { "fails" },
            if only_dense {
                "caught alone"
            } else {
                "not isolated"
            },
            e.as_secs_f64()
        ),
    )
}

fn brute_auc(probs: &[f64], labels: &[u8]) -> Option<f64> {
    let mut wins = 0u64;
    let mut pairs = 0u64;
    for (i, &pi) in probs.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &pj) in probs.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            wins += if pi > pj {
                2
            } else if pi == pj {
                1
            } else {
                0
            };
        }
    }
    (pairs > 0).then(|| wins as f64 / (2 * pairs) as f64)
}

fn brute_check(probs: &[f64], labels: &[u8]) -> Result<bool, Error> {
    let pred: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let (mut tn, mut fp, mut fn_, mut tp) = (0u64, 0u64, 0u64, 0u64);
    for (&y, &p) in labels.iter().zip(&pred) {
        match (y, p) {
            (0, 0) => tn += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            _ => tp += 1,
        }
    }
    let c = confusion_matrix(labels, &pred)?;
    let mut ok = (c.tn, c.fp, c.fn_, c.tp) == (tn, fp, fn_, tp);
    let n = labels.len() as f64;
    ok &= c.accuracy() == (tn + tp) as f64 / n;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let f1 = |p: f64, r: f64| {
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };
    let r = prf(&c);
    let (p1, r1) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    let (p0, r0) = (ratio(tn, tn + fn_), ratio(tn, tn + fp));
    ok &= r.per_class[1].precision == p1
        && r.per_class[1].recall == r1
        && r.per_class[1].f1 == f1(p1, r1);
    ok &= r.per_class[0].precision == p0
        && r.per_class[0].recall == r0
        && r.per_class[0].f1 == f1(p0, r0);
    let auc = match roc_auc(probs, labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    ok &= auc == brute_auc(probs, labels);
    Ok(ok)
}

fn metric_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=200);
        // coarse grid so ties and exact 0.5 thresholds occur
        let probs: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..=20) as f64 / 20.0)
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        match brute_check(&probs, &labels) {
            Ok(true) => {}
            Ok(false) => mismatches += 1,
            Err(e) => return Outcome::Fail(e.to_string()),
        }
    }
    let example = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).ok();
    let e = t.elapsed();
    verdict(
        mismatches == 0 && example == Some(0.75) && within(e, 30.0),
        format!(
            "{mismatches} mismatches over 1000 sets, worked AUC {example:?} in {:.2}s",
            e.as_secs_f64()
        ),
    )
}

fn desk_learning() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut cfg = base_config(dir.path());
    cfg.arch = Architecture::CustomCnn;
    cfg.scale = 0.25;
    cfg.input_size = 32;
    cfg.synthetic = 2000;
    cfg.train.learning_rate = 0.001;
    cfg.train.batch_size = 32;
    cfg.train.epochs = 10;
    let t = Instant::now();
    let out = match load_data(&cfg).and_then(|d| train(&cfg, &d, None)) {
        Ok(o) => o,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let e = t.elapsed();
    let last = out.epochs.last().expect("ten epochs");
    verdict(
        last.train_accuracy >= 0.95 && last.val_accuracy >= 0.90 && within(e, 600.0),
        format!(
            "epoch {} train {:.4} validation {:.4} in {:.1}s",
            last.epoch,
            last.train_accuracy,
            last.val_accuracy,
            e.as_secs_f64()
        ),
    )
}

fn determinism_and_resume() -> Outcome {
    let run = || -> Result<(String, String, Vec<u8>), malaria_cli::CliError> {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut cfg = base_config(&dir.path().join("run"));
        cfg.arch = Architecture::CustomCnn;
        cfg.scale = 0.125;
        cfg.input_size = 32;
        cfg.synthetic = 300;
        cfg.train.epochs = 2;
        let data = load_data(&cfg)?;

        let first = train(&cfg, &data, None)?;
        let a = fs::read_to_string(&first.manifest_path).expect("manifest");
        let straight = fs::read(&first.checkpoint_path).expect("checkpoint");
        let again = train(&cfg, &data, None)?;
        let b = fs::read_to_string(&again.manifest_path).expect("manifest");

        let mut half = cfg.clone();
        half.output_dir = dir.path().join("half");
        half.train.epochs = 1;
        let h = train(&half, &data, None)?;
        let mut rest = cfg.clone();
        rest.output_dir = dir.path().join("rest");
        let r = train(&rest, &data, Some(&h.checkpoint_path))?;
        let resumed = fs::read(&r.checkpoint_path).expect("checkpoint");
        let same_ckpt = if straight == resumed {
            "same"
        } else {
            "differs"
        };
        Ok((
            without_timings(&a),
            without_timings(&b),
            same_ckpt.as_bytes().to_vec(),
        ))
    };
    match run() {
        Ok((a, b, ck)) => {
            let manifests = a == b;
            let resumed = ck == b"same";
            verdict(
                manifests && resumed,
                format!(
                    "repeat manifests {}, resumed checkpoint {}",
                    if manifests { "identical" } else { "differ" },
                    if resumed { "bit-identical" } else { "differs" }
                ),
            )
        }
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn real_data_smoke() -> Outcome {
    let Some(root) = resolve_data_root(None) else {
        return Outcome::Skipped(format!(
            "{} not set or missing",
            malaria_core::data::DATA_DIR_ENV
        ));
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let mut cfg = base_config(dir.path());
    cfg.arch = Architecture::CustomCnn;
    cfg.input_size = 64;
    cfg.data_root = Some(root);
    cfg.subset = 0.1;
    let t = Instant::now();
    match load_data(&cfg).and_then(|d| train(&cfg, &d, None)) {
        Ok(o) => {
            let e = t.elapsed();
            verdict(
                o.report.accuracy >= 0.85 && within(e, 1800.0),
                format!(
                    "test accuracy {:.4} on {} images in {:.0}s",
                    o.report.accuracy,
                    o.report.n,
                    e.as_secs_f64()
                ),
            )
        }
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn report_fidelity() -> Outcome {
    let check = || -> Result<(bool, String), malaria_cli::CliError> {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut cfg = base_config(dir.path());
        cfg.scale = 0.125;
        cfg.input_size = 64;
        cfg.synthetic = 200;
        cfg.train.epochs = 1;
        cfg.compare_architectures = Architecture::ALL.to_vec();
        let data = load_data(&cfg)?;
        let out = compare(&cfg, &data)?;
        let names: Vec<String> = Architecture::ALL
            .iter()
            .map(|a| a.display_name().to_string())
            .collect();

        let csv =
            fs::read_to_string(dir.path().join(commands::REPORT_CSV_FILE)).expect("report csv");
        let rows = parse_report_csv(&csv)?;
        let row_names: Vec<String> = rows.iter().map(|r| r.method.clone()).collect();
        let rendered = render_report(&out.rows(), ReportFormat::Csv)?;
        let csv_round_trip = rendered == csv;

        let bars = read_chart_csv(&chart_sidecar(&dir.path().join(commands::CHART_FILE)))?;
        let expected: Vec<(String, f64)> = out
            .rows()
            .iter()
            .map(|(n, r)| (n.clone(), r.accuracy))
            .collect();
        let svg = fs::read_to_string(dir.path().join(commands::CHART_FILE)).expect("chart");
        let svg_bars = svg.matches("class=\"bar\"").count();

        let ok = row_names == names && bars == expected && svg_bars == 6 && csv_round_trip;
        Ok((
            ok,
            format!(
                "{} rows in order: {}, {} bars, sidecar round trip {}",
                rows.len(),
                row_names == names,
                svg_bars,
                if bars == expected { "exact" } else { "inexact" }
            ),
        ))
    };
    match check() {
        Ok((ok, detail)) => verdict(ok, detail),
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

/// Consistency checks beyond the listed criteria: evaluation of a saved
/// checkpoint reproduces the run's test report, and truncated files are
/// rejected with a byte offset.
fn evaluate_consistency() -> Outcome {
    let check = || -> Result<(bool, String), malaria_cli::CliError> {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut cfg = base_config(dir.path());
        cfg.scale = 0.125;
        cfg.input_size = 32;
        cfg.synthetic = 200;
        cfg.train.epochs = 1;
        let data = load_data(&cfg)?;
        let out = train(&cfg, &data, None)?;
        let (_, report) = evaluate(&cfg, &out.checkpoint_path)?;
        let same = report == out.report;
        let manifest_acc = fs::read_to_string(&out.manifest_path)
            .ok()
            .and_then(|t| malaria_cli::manifest::lookup(&t, "test", "accuracy"))
            .and_then(|v| v.parse::<f64>().ok());
        let bytes = fs::read(&out.checkpoint_path).expect("checkpoint");
        let cut = dir.path().join("cut.ckpt");
        fs::write(&cut, &bytes[..bytes.len() / 2]).expect("write");
        let truncated =
            matches!(load_checkpoint(&cut), Err(Error::Format { offset, .. }) if offset > 0);
        let recomputed =
            evaluate_predictions(&PredictionSet::new(vec![0.5, 0.5], vec![0, 1])?)?.accuracy == 0.5;
        Ok((
            same && manifest_acc == Some(report.accuracy) && truncated && recomputed,
            format!("evaluate matches run {same}, truncated checkpoint rejected with offset {truncated}"),
        ))
    };
    match check() {
        Ok((ok, detail)) => verdict(ok, detail),
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

/// Writes to the process stdout directly so lines show without `--nocapture`.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("parameter anchors", parameter_anchors),
        ("split arithmetic", split_arithmetic),
        ("gradient suite", gradient_suite),
        ("metric oracle equivalence", metric_oracle),
        ("desk-scale learning", desk_learning),
        ("determinism and resume", determinism_and_resume),
        ("real-data smoke", real_data_smoke),
        ("report fidelity", report_fidelity),
        ("evaluate consistency (extra)", evaluate_consistency),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        match f() {
            Outcome::Pass(d) => report(&format!("PASS     {name}: {d}")),
            Outcome::Skipped(d) => report(&format!("SKIPPED  {name}: {d}")),
            Outcome::Fail(d) => {
                report(&format!("FAIL     {name}: {d}"));
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
