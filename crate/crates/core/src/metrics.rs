//! Binary classification metrics, report rendering and the accuracy chart.
//!
//! Parasitized (label 1) is the positive class. A probability of exactly 0.5
//! predicts positive.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const DECISION_THRESHOLD: f64 = 0.5;
pub const CSV_HEADER: [&str; 8] = [
    "method",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "auc_roc",
    "rmse",
    "n",
];

/// Positive-class probabilities with their true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
}

impl PredictionSet {
    pub fn new(probs: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::Argument(format!(
                "{} probabilities for {} labels",
                probs.len(),
                labels.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Argument(format!("probability {p} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Label(format!("label {l} is not 0 or 1")));
        }
        Ok(PredictionSet { probs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn predicted(&self) -> Vec<u8> {
        self.probs
            .iter()
            .map(|&p| (p >= DECISION_THRESHOLD) as u8)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tp: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// The same matrix with the class roles swapped.
    pub fn swapped(&self) -> Confusion {
        Confusion {
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
            tp: self.tn,
        }
    }
}

/// Tallies `(true, predicted)` pairs.
pub fn confusion_matrix(truth: &[u8], predicted: &[u8]) -> Result<Confusion> {
    if truth.is_empty() {
        return Err(Error::Argument(
            "confusion matrix of an empty prediction set".to_string(),
        ));
    }
    if truth.len() != predicted.len() {
        return Err(Error::Argument(format!(
            "{} labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut c = Confusion::default();
    for (&t, &p) in truth.iter().zip(predicted) {
        match (t, p) {
            (0, 0) => c.tn += 1,
            (0, 1) => c.fp += 1,
            (1, 0) => c.fn_ += 1,
            (1, 1) => c.tp += 1,
            _ => {
                return Err(Error::Label(format!(
                    "labels must be 0 or 1, got ({t}, {p})"
                )))
            }
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class, macro and support-weighted precision/recall/F1.
#[derive(Debug, Clone, PartialEq)]
pub struct PrfReport {
    /// Indexed by class: `[uninfected, parasitized]`.
    pub per_class: [Prf; 2],
    pub macro_avg: Prf,
    pub weighted: Prf,
    /// Which zero denominators were replaced by 0.
    pub degenerate: Vec<String>,
}

fn ratio(num: u64, den: u64, what: String, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(what);
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_prf(c: &Confusion, class: &str, flags: &mut Vec<String>) -> Prf {
    let precision = ratio(c.tp, c.tp + c.fp, format!("{class} precision"), flags);
    let recall = ratio(c.tp, c.tp + c.fn_, format!("{class} recall"), flags);
    let f1 = if precision + recall == 0.0 {
        flags.push(format!("{class} f1"));
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

pub fn prf(c: &Confusion) -> PrfReport {
    let mut degenerate = Vec::new();
    let neg = class_prf(&c.swapped(), "uninfected", &mut degenerate);
    let pos = class_prf(c, "parasitized", &mut degenerate);
    let avg = |f: fn(&Prf) -> f64, wn: f64, wp: f64| f(&neg) * wn + f(&pos) * wp;
    let mean = |f: fn(&Prf) -> f64| avg(f, 0.5, 0.5);
    let macro_avg = Prf {
        precision: mean(|p| p.precision),
        recall: mean(|p| p.recall),
        f1: mean(|p| p.f1),
    };
    let n = c.total() as f64;
    let (wn, wp) = if n > 0.0 {
        ((c.tn + c.fp) as f64 / n, (c.tp + c.fn_) as f64 / n)
    } else {
        (0.0, 0.0)
    };
    let weighted = Prf {
        precision: avg(|p| p.precision, wn, wp),
        recall: avg(|p| p.recall, wn, wp),
        f1: avg(|p| p.f1, wn, wp),
    };
    PrfReport {
        per_class: [neg, pos],
        macro_avg,
        weighted,
        degenerate,
    }
}

/// Probability that a random positive outranks a random negative, ties ½.
/// Computed from midranks, exact in 64-bit.
pub fn roc_auc(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::Argument("NaN score".to_string()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "roc_auc needs both classes present".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    // twice the rank sum of the positives, using midranks for ties (1-based)
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        let twice_midrank = (i + 1 + j + 1) as u64;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += positives * twice_midrank;
        i = j + 1;
    }
    // 2U = 2R - P(P+1)
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

pub fn rmse(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Argument(format!(
            "rmse over {} scores and {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let sq: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| (p - l as f64).powi(2))
        .sum();
    Ok((sq / probs.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub prf: PrfReport,
    /// `None` when only one class is present.
    pub auc_roc: Option<f64>,
    pub rmse: f64,
    pub n: usize,
}

pub fn evaluate_predictions(preds: &PredictionSet) -> Result<MetricsReport> {
    let confusion = confusion_matrix(&preds.labels, &preds.predicted())?;
    let auc_roc = match roc_auc(&preds.probs, &preds.labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        accuracy: confusion.accuracy(),
        prf: prf(&confusion),
        confusion,
        auc_roc,
        rmse: rmse(&preds.probs, &preds.labels)?,
        n: preds.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

/// Renders one row per model in the given order.
///
/// The table shows accuracy as a percentage and the weighted precision,
/// recall and F1, followed by per-class and macro detail. The CSV carries
/// the weighted averages, accuracy as a fraction, all to 4 decimals; an
/// undefined AUC is left empty.
pub fn render_report(rows: &[(String, MetricsReport)], format: ReportFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Argument("no reports to render".to_string()));
    }
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Argument(format!("csv: {e}"));
            w.write_record(CSV_HEADER).map_err(csv_err)?;
            for (name, r) in rows {
                let p = &r.prf.weighted;
                w.write_record([
                    name.clone(),
                    format!("{:.4}", r.accuracy),
                    format!("{:.4}", p.precision),
                    format!("{:.4}", p.recall),
                    format!("{:.4}", p.f1),
                    r.auc_roc.map_or_else(String::new, |a| format!("{a:.4}")),
                    format!("{:.4}", r.rmse),
                    r.n.to_string(),
                ])
                .map_err(csv_err)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::Argument(format!("csv: {e}")))?;
            Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
        }
        ReportFormat::Table => {
            let width = rows
                .iter()
                .map(|(n, _)| n.len())
                .max()
                .unwrap_or(0)
                .max("Method".len());
            let mut s = String::new();
            let _ = writeln!(
                s,
                "{:<width$}  {:>9}  {:>9}  {:>7}  {:>8}  {:>7}  {:>6}  {:>6}",
                "Method", "Accuracy", "Precision", "Recall", "F1-Score", "AUC-ROC", "RMSE", "n"
            );
            for (name, r) in rows {
                let p = &r.prf.weighted;
                let _ = writeln!(
                    s,
                    "{:<width$}  {:>9}  {:>9.4}  {:>7.4}  {:>8.4}  {:>7}  {:>6.4}  {:>6}",
                    name,
                    format!("{:.2}%", r.accuracy * 100.0),
                    p.precision,
                    p.recall,
                    p.f1,
                    fmt4(r.auc_roc),
                    r.rmse,
                    r.n
                );
            }
            let _ = writeln!(
                s,
                "\nPrecision/Recall/F1 above are support-weighted averages.\n"
            );
            for (name, r) in rows {
                let c = &r.confusion;
                let _ = writeln!(
                    s,
                    "{name}: TN={} FP={} FN={} TP={}",
                    c.tn, c.fp, c.fn_, c.tp
                );
                for (label, p) in [
                    ("uninfected", &r.prf.per_class[0]),
                    ("parasitized", &r.prf.per_class[1]),
                    ("macro", &r.prf.macro_avg),
                    ("weighted", &r.prf.weighted),
                ] {
                    let _ = writeln!(
                        s,
                        "  {label:<12} precision {:.4}  recall {:.4}  f1 {:.4}",
                        p.precision, p.recall, p.f1
                    );
                }
                if !r.prf.degenerate.is_empty() {
                    let _ = writeln!(
                        s,
                        "  zero denominators reported as 0: {}",
                        r.prf.degenerate.join(", ")
                    );
                }
                if r.auc_roc.is_none() {
                    let _ = writeln!(s, "  auc_roc undefined: only one class present");
                }
            }
            Ok(s)
        }
    }
}

/// One parsed CSV report row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc_roc: Option<f64>,
    pub rmse: f64,
    pub n: usize,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let bad = |m: String| Error::Format {
        offset: 0,
        message: m,
    };
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| bad(format!("{}: bad {} {:?}", &rec[0], CSV_HEADER[i], &rec[i])))
        };
        rows.push(ReportRow {
            method: rec[0].to_string(),
            accuracy: num(1)?,
            precision: num(2)?,
            recall: num(3)?,
            f1: num(4)?,
            auc_roc: if rec[5].is_empty() {
                None
            } else {
                Some(num(5)?)
            },
            rmse: num(6)?,
            n: rec[7]
                .parse()
                .map_err(|_| bad(format!("bad n {:?}", &rec[7])))?,
        });
    }
    Ok(rows)
}

/// Path of the CSV written next to a chart.
pub fn chart_sidecar(svg_path: &Path) -> PathBuf {
    svg_path.with_extension("csv")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Bar chart of accuracy per model as SVG, one bar per entry in order.
pub fn accuracy_chart_svg(entries: &[(String, f64)]) -> Result<String> {
    if entries.is_empty() {
        return Err(Error::Argument("no accuracies to chart".to_string()));
    }
    const PLOT_H: f64 = 300.0;
    const BAR_W: f64 = 60.0;
    const GAP: f64 = 30.0;
    const LEFT: f64 = 60.0;
    const TOP: f64 = 40.0;
    let width = LEFT + GAP + entries.len() as f64 * (BAR_W + GAP);
    let height = TOP + PLOT_H + 80.0;
    let base = TOP + PLOT_H;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">Accuracy comparison</text>"#,
        width / 2.0
    );
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = base - v * PLOT_H;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}%</text>"##,
            width - GAP / 2.0,
            LEFT - 6.0,
            y + 4.0,
            tick * 20
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        width - GAP / 2.0
    );
    for (i, (name, acc)) in entries.iter().enumerate() {
        if !(0.0..=1.0).contains(acc) {
            return Err(Error::Argument(format!(
                "{name}: accuracy {acc} outside [0, 1]"
            )));
        }
        let x = LEFT + GAP + i as f64 * (BAR_W + GAP);
        let h = acc * PLOT_H;
        let name = xml_escape(name);
        let _ = writeln!(
            s,
            r##"<rect class="bar" data-name="{name}" data-value="{acc}" x="{x}" y="{}" width="{BAR_W}" height="{h}" fill="#4a78b5"/>"##,
            base - h
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{:.2}%</text>"#,
            x + BAR_W / 2.0,
            base - h - 4.0,
            acc * 100.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{name}</text>"#,
            x + BAR_W / 2.0,
            base + 16.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes the SVG chart and a `name,accuracy` CSV sidecar with exact values.
pub fn emit_accuracy_chart(entries: &[(String, f64)], svg_path: &Path) -> Result<()> {
    let svg = accuracy_chart_svg(entries)?;
    fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))?;
    let sidecar = chart_sidecar(svg_path);
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Argument(format!("csv: {e}"));
    w.write_record(["method", "accuracy"]).map_err(csv_err)?;
    for (name, acc) in entries {
        // `{}` prints the shortest string that parses back to the same f64
        w.write_record([name.clone(), format!("{acc}")])
            .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Argument(format!("csv: {e}")))?;
    fs::write(&sidecar, bytes).map_err(|e| Error::io(&sidecar, e))
}

pub fn read_chart_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format {
            offset: 0,
            message: e.to_string(),
        })?;
        let acc = rec[1].parse().map_err(|_| Error::Format {
            offset: 0,
            message: format!("bad accuracy {:?}", &rec[1]),
        })?;
        out.push((rec[0].to_string(), acc));
    }
    Ok(out)
}
