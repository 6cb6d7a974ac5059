use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use malaria_core::data::{
    batch_iter, class_counts, load_image_dataset, load_image_subset, ordered_batches,
    resolve_data_root, split_811, synthetic_dataset, DatasetSplit, LabeledImage,
};
use malaria_core::gradcheck::{run_suite, GradTamper, SUITE_TOLERANCE};
use malaria_core::metrics::{
    emit_accuracy_chart, evaluate_predictions, render_report, MetricsReport, PredictionSet,
    ReportFormat,
};
use malaria_core::train::{
    evaluate as evaluate_model, load_checkpoint, save_checkpoint, train_epoch, Trainer,
    DROPOUT_STREAM,
};
use malaria_core::zoo::{build, count_params, Architecture, BuildOptions, ParamCount};
use malaria_core::Model;

use crate::config::RunConfig;
use crate::manifest::{write_atomic, Manifest, TIMINGS_SECTION};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_TXT_FILE: &str = "report.txt";
pub const CHART_FILE: &str = "chart.svg";

/// Records plus the split every command shares.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<LabeledImage>,
    pub split: DatasetSplit,
    pub source: String,
    pub skipped: Vec<(String, String)>,
}

impl Dataset {
    /// `(split name, [uninfected, parasitized])` for train, validation, test.
    pub fn class_counts(&self) -> [(&'static str, [usize; 2]); 3] {
        [
            ("train", class_counts(&self.records, &self.split.train)),
            (
                "validation",
                class_counts(&self.records, &self.split.validation),
            ),
            ("test", class_counts(&self.records, &self.split.test)),
        ]
    }
}

/// Synthetic images when `data.synthetic > 0`, else the corpus under
/// `data.root` or `$MALARIA_DATA_DIR`. Synthetic generation and the split
/// both use `data.split_seed`.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    cfg.validate()?;
    let size = [cfg.input_size, cfg.input_size];
    let (records, skipped, source) = if cfg.synthetic > 0 {
        let records = synthetic_dataset(cfg.synthetic, size, cfg.split_seed)?;
        (
            records,
            Vec::new(),
            format!("synthetic n={}", cfg.synthetic),
        )
    } else {
        let root = resolve_data_root(cfg.data_root.as_deref()).ok_or_else(|| {
            CliError::config(
                None,
                "no data source: set data.root, MALARIA_DATA_DIR or data.synthetic",
            )
        })?;
        let (records, report) = if cfg.subset < 1.0 {
            load_image_subset(&root, size, cfg.subset, cfg.split_seed)?
        } else {
            load_image_dataset(&root, size)?
        };
        (
            records,
            report.skipped,
            format!("directory {}", root.display()),
        )
    };
    let split = split_811(records.len(), cfg.split_seed)?;
    Ok(Dataset {
        records,
        split,
        source,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub arch: Architecture,
    pub epochs: Vec<EpochRecord>,
    pub report: MetricsReport,
    pub params: ParamCount,
    pub out_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn build_options(cfg: &RunConfig) -> BuildOptions {
    BuildOptions {
        scale: cfg.scale,
        freeze_base: cfg.freeze_base,
        seed: cfg.train.seed,
    }
}

fn predictions(
    model: &Model<f32>,
    data: &Dataset,
    indices: &[usize],
    batch: usize,
) -> Result<(f64, PredictionSet), CliError> {
    let e = evaluate_model(model, ordered_batches(&data.records, indices, batch)?)?;
    let probs = e.positive_probs.iter().map(|p| p.clamp(0.0, 1.0)).collect();
    Ok((e.loss, PredictionSet::new(probs, e.labels)?))
}

fn write_reports(out_dir: &Path, rows: &[(String, MetricsReport)]) -> Result<(), CliError> {
    write_atomic(
        &out_dir.join(REPORT_CSV_FILE),
        render_report(rows, ReportFormat::Csv)?.as_bytes(),
    )?;
    write_atomic(
        &out_dir.join(REPORT_TXT_FILE),
        render_report(rows, ReportFormat::Table)?.as_bytes(),
    )?;
    let bars: Vec<(String, f64)> = rows.iter().map(|(n, r)| (n.clone(), r.accuracy)).collect();
    emit_accuracy_chart(&bars, &out_dir.join(CHART_FILE))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| malaria_core::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn put_config(m: &mut Manifest, cfg: &RunConfig) {
    for (k, v, origin) in cfg.resolved() {
        m.put("config", k, format!("{v}  # {origin}"));
    }
}

fn put_data(m: &mut Manifest, data: &Dataset) {
    m.put("data", "source", &data.source);
    m.put("data", "records", data.records.len());
    m.put("data", "skipped", data.skipped.len());
    for (id, reason) in &data.skipped {
        m.put("data", format!("skipped.{id}"), reason);
    }
    for (name, [u, p]) in data.class_counts() {
        m.put(
            "data",
            format!("split.{name}"),
            format!("{} (uninfected {u}, parasitized {p})", u + p),
        );
    }
}

/// Trains `cfg.arch` for `train.epochs` epochs in total, evaluates on the test
/// split and writes the manifest, checkpoint, reports and chart to
/// `output.dir`. With `resume`, training continues from a checkpoint's epoch.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    resume: Option<&Path>,
) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let started = Instant::now();
    let out_dir = cfg.output_dir.clone();
    create_dir(&out_dir)?;
    let mut model: Model<f32> = build(cfg.arch, &cfg.input_shape(), &build_options(cfg))?;
    let mut trainer = Trainer::new(cfg.train.clone())?;
    if let Some(path) = resume {
        let ck = load_checkpoint(path)?;
        if ck.model_name != cfg.arch.id() {
            return Err(CliError::config(
                None,
                format!(
                    "checkpoint holds {}, config asks for {}",
                    ck.model_name,
                    cfg.arch.id()
                ),
            ));
        }
        if ck.input_shape()? != cfg.input_shape() || ck.scale != cfg.scale {
            return Err(CliError::config(
                None,
                format!(
                    "checkpoint was trained at input {:?} scale {}, config has {:?} scale {}",
                    ck.input_shape()?,
                    ck.scale,
                    cfg.input_shape(),
                    cfg.scale
                ),
            ));
        }
        let restored = ck.restore(&mut model)?;
        trainer.optimizer = restored.optimizer;
        trainer.epoch = restored.epoch;
        trainer.dropout_rng = restored.dropout_rng;
    }
    let first_epoch = trainer.epoch;
    let batch = cfg.train.batch_size;
    let mut epochs = Vec::new();
    while trainer.epoch < cfg.train.epochs as u64 {
        let t = Instant::now();
        let batches = batch_iter(
            &data.records,
            &data.split.train,
            batch,
            cfg.train.seed,
            trainer.epoch,
        )?;
        let stats = train_epoch(&mut model, batches, &mut trainer)?;
        let (val_loss, val) = predictions(&model, data, &data.split.validation, batch)?;
        let val_accuracy = evaluate_predictions(&val)?.accuracy;
        let record = EpochRecord {
            epoch: trainer.epoch,
            train_loss: stats.loss,
            train_accuracy: stats.accuracy,
            val_loss,
            val_accuracy,
            seconds: t.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4} ({:.1}s)",
            cfg.arch,
            record.epoch,
            record.train_loss,
            record.train_accuracy,
            record.val_loss,
            record.val_accuracy,
            record.seconds
        );
        epochs.push(record);
    }
    let (test_loss, test) = predictions(&model, data, &data.split.test, batch)?;
    let report = evaluate_predictions(&test)?;
    let params = count_params(&model);

    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint_path, &model, &trainer)?;
    write_reports(
        &out_dir,
        &[(cfg.arch.display_name().to_string(), report.clone())],
    )?;

    let mut m = Manifest::new();
    m.put("run", "command", "train");
    m.put("run", "architecture", cfg.arch.id());
    m.put(
        "run",
        "resumed_from",
        resume.map_or("none".to_string(), |p| p.display().to_string()),
    );
    m.put("run", "first_epoch", first_epoch + 1);
    m.put(
        "run",
        "stated_output_activation",
        &model.stated_output_activation,
    );
    m.put("run", "trained_output_activation", "softmax");
    put_config(&mut m, cfg);
    m.put("seeds", "train.seed", cfg.train.seed);
    m.put("seeds", "data.split_seed", cfg.split_seed);
    m.put("seeds", "dropout_stream", DROPOUT_STREAM);
    put_data(&mut m, data);
    m.put("model", "nodes", model.nodes().len());
    m.put("model", "head_only_trainable", model.head_only_trainable);
    m.put("model", "parameters.trainable", params.trainable);
    m.put("model", "parameters.non_trainable", params.non_trainable);
    for e in &epochs {
        m.put(
            "epochs",
            format!("epoch.{}", e.epoch),
            format!(
                "train_loss={} train_accuracy={} val_loss={} val_accuracy={}",
                e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
            ),
        );
    }
    m.put("test", "loss", test_loss);
    m.put_metrics("test", &report);
    m.put("artifacts", "checkpoint", CHECKPOINT_FILE);
    m.put("artifacts", "report_csv", REPORT_CSV_FILE);
    m.put("artifacts", "report_txt", REPORT_TXT_FILE);
    m.put("artifacts", "chart", CHART_FILE);
    for e in &epochs {
        m.put(
            TIMINGS_SECTION,
            format!("epoch.{}.seconds", e.epoch),
            e.seconds,
        );
    }
    m.put(
        TIMINGS_SECTION,
        "total_seconds",
        started.elapsed().as_secs_f64(),
    );
    let manifest_path = out_dir.join(MANIFEST_FILE);
    m.write_atomic(&manifest_path)?;

    Ok(TrainOutcome {
        arch: cfg.arch,
        epochs,
        report,
        params,
        out_dir,
        manifest_path,
        checkpoint_path,
    })
}

/// Rebuilds the checkpointed model and evaluates it on the test split of the
/// configured data. The architecture, scale and input size come from the
/// checkpoint; an explicitly configured architecture must agree.
pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
) -> Result<(Architecture, MetricsReport), CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let arch: Architecture = ck.model_name.parse().map_err(|_| {
        CliError::config(
            None,
            format!(
                "checkpoint architecture {:?} is not in the registry",
                ck.model_name
            ),
        )
    })?;
    if cfg.origin("model.arch") != crate::Origin::Default && cfg.arch != arch {
        return Err(CliError::config(
            None,
            format!("checkpoint holds {arch}, config asks for {}", cfg.arch),
        ));
    }
    let shape = ck.input_shape()?;
    let &[size, width, 3] = shape.as_slice() else {
        return Err(CliError::config(
            None,
            format!("unsupported checkpoint input shape {shape:?}"),
        ));
    };
    if size != width {
        return Err(CliError::config(
            None,
            format!("unsupported checkpoint input shape {shape:?}"),
        ));
    }
    let mut cfg = cfg.clone();
    cfg.arch = arch;
    cfg.input_size = size;
    cfg.scale = ck.scale;
    cfg.freeze_base = Some(ck.head_only_trainable()?);
    let data = load_data(&cfg)?;
    let mut model: Model<f32> = build(arch, &shape, &build_options(&cfg))?;
    ck.restore(&mut model)?;
    let (_, preds) = predictions(&model, &data, &data.split.test, cfg.train.batch_size)?;
    Ok((arch, evaluate_predictions(&preds)?))
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub runs: Vec<TrainOutcome>,
    pub manifest_path: PathBuf,
}

impl CompareOutcome {
    pub fn rows(&self) -> Vec<(String, MetricsReport)> {
        self.runs
            .iter()
            .map(|r| (r.arch.display_name().to_string(), r.report.clone()))
            .collect()
    }
}

/// Trains every architecture in `compare.architectures` on one shared split,
/// each under `output.dir/<arch>/`, then writes the combined table and chart.
pub fn compare(cfg: &RunConfig, data: &Dataset) -> Result<CompareOutcome, CliError> {
    cfg.validate()?;
    let started = Instant::now();
    create_dir(&cfg.output_dir)?;
    let run_one = |arch: &Architecture| -> Result<TrainOutcome, CliError> {
        let mut sub = cfg.clone();
        sub.arch = *arch;
        sub.output_dir = cfg.output_dir.join(arch.id());
        train(&sub, data, None)
    };
    let runs: Vec<TrainOutcome> = if cfg.compare_parallel {
        cfg.compare_architectures
            .par_iter()
            .map(run_one)
            .collect::<Result<_, _>>()?
    } else {
        cfg.compare_architectures
            .iter()
            .map(run_one)
            .collect::<Result<_, _>>()?
    };
    let outcome = CompareOutcome {
        manifest_path: cfg.output_dir.join(MANIFEST_FILE),
        runs,
    };
    write_reports(&cfg.output_dir, &outcome.rows())?;

    let mut m = Manifest::new();
    m.put("run", "command", "compare");
    m.put(
        "run",
        "architectures",
        cfg.compare_architectures
            .iter()
            .map(|a| a.id())
            .collect::<Vec<_>>()
            .join(","),
    );
    put_config(&mut m, cfg);
    m.put("seeds", "train.seed", cfg.train.seed);
    m.put("seeds", "data.split_seed", cfg.split_seed);
    put_data(&mut m, data);
    for r in &outcome.runs {
        let id = r.arch.id();
        m.put("results", format!("{id}.accuracy"), r.report.accuracy);
        m.put(
            "results",
            format!("{id}.parameters.trainable"),
            r.params.trainable,
        );
        m.put(
            "results",
            format!("{id}.manifest"),
            format!("{id}/{MANIFEST_FILE}"),
        );
    }
    m.put("artifacts", "report_csv", REPORT_CSV_FILE);
    m.put("artifacts", "report_txt", REPORT_TXT_FILE);
    m.put("artifacts", "chart", CHART_FILE);
    m.put(
        TIMINGS_SECTION,
        "total_seconds",
        started.elapsed().as_secs_f64(),
    );
    m.write_atomic(&outcome.manifest_path)?;
    Ok(outcome)
}

/// Runs the layer gradient suite. Returns the printable report and whether
/// every kind passed.
pub fn gradcheck_report(tamper: Option<GradTamper<'_>>) -> Result<(String, bool), CliError> {
    let results = run_suite(tamper)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:>14}  result (tolerance {SUITE_TOLERANCE:e})",
        "layer kind", "max rel err"
    );
    for r in &results {
        let _ = writeln!(
            s,
            "{:<24} {:>14.3e}  {}",
            r.kind,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.kind.as_str())
        .collect();
    if failed.is_empty() {
        let _ = writeln!(s, "all {} kinds passed", results.len());
    } else {
        let _ = writeln!(s, "failed: {}", failed.join(", "));
    }
    Ok((s, failed.is_empty()))
}

pub const ANCHOR_INPUT: [usize; 3] = [128, 128, 3];
pub const CUSTOM_CNN_BLOCK_ANCHORS: [usize; 3] = [1024, 18752, 74368];
pub const CUSTOM_CNN_DENSE_ANCHOR: usize = 258;
pub const VGG19_TRAINABLE_ANCHOR: usize = 4_195_842;

/// Builds all six architectures at `scale` on 128x128x3 input, prints their
/// totals and checks the parameter anchors (which only apply at scale 1).
pub fn paramcheck_report(scale: f64) -> Result<(String, bool), CliError> {
    let mut s = String::new();
    let mut ok = true;
    let applicable = scale == 1.0;
    let mut check = |s: &mut String, what: &str, got: usize, want: usize| {
        if applicable {
            let pass = got == want;
            ok &= pass;
            let _ = writeln!(
                s,
                "  {what:<36} {got:>12} expected {want:>12}  {}",
                if pass { "PASS" } else { "FAIL" }
            );
        } else {
            let _ = writeln!(s, "  {what:<36} {got:>12} not applicable (scale != 1)");
        }
    };
    let _ = writeln!(
        s,
        "parameter counts at scale {scale}, input {ANCHOR_INPUT:?}"
    );
    for arch in Architecture::ALL {
        let model: Model<f32> = build(
            arch,
            &ANCHOR_INPUT,
            &BuildOptions {
                scale,
                ..BuildOptions::default()
            },
        )?;
        let c = count_params(&model);
        let _ = writeln!(
            s,
            "{:<14} total {:>11}  trainable {:>11}  non-trainable {:>11}",
            arch.id(),
            c.total(),
            c.trainable,
            c.non_trainable
        );
        match arch {
            Architecture::CustomCnn => {
                for (i, want) in CUSTOM_CNN_BLOCK_ANCHORS.into_iter().enumerate() {
                    let block = format!("block{}_", i + 1);
                    check(
                        &mut s,
                        &format!("block {} total", i + 1),
                        c.prefix_total(&block),
                        want,
                    );
                }
                let (dense, _) = c.node("predictions").unwrap_or_default();
                check(&mut s, "final dense", dense, CUSTOM_CNN_DENSE_ANCHOR);
            }
            Architecture::Vgg19 => check(
                &mut s,
                "trainable total",
                c.trainable,
                VGG19_TRAINABLE_ANCHOR,
            ),
            _ => {}
        }
    }
    if applicable {
        let _ = writeln!(
            s,
            "{}",
            if ok {
                "all anchors passed"
            } else {
                "anchor mismatch"
            }
        );
    }
    Ok((s, ok))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Origin;

    fn tiny(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("data.synthetic", "40"),
            ("model.input_size", "32"),
            ("train.epochs", "1"),
            ("train.batch_size", "8"),
        ] {
            cfg.set(k, v, Origin::Flag).unwrap();
        }
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn zero_epochs_evaluates_the_untrained_model() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.train.epochs = 0;
        let data = load_data(&cfg).unwrap();
        let out = train(&cfg, &data, None).unwrap();
        assert!(out.epochs.is_empty());
        assert_eq!(out.report.n, 4);
        for f in [
            MANIFEST_FILE,
            CHECKPOINT_FILE,
            REPORT_CSV_FILE,
            REPORT_TXT_FILE,
            CHART_FILE,
            "chart.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn missing_data_source_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.data_root = Some(PathBuf::from("/nonexistent/malaria"));
        let err = load_data(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), crate::EXIT_CONFIG);
    }

    #[test]
    fn paramcheck_gates_anchors_on_scale() {
        let (text, ok) = paramcheck_report(0.5).unwrap();
        assert!(ok);
        assert!(text.contains("not applicable"));
        for arch in Architecture::ALL {
            assert!(text.contains(arch.id()));
        }
    }
}
