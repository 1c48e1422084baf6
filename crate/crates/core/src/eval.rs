//! Paired benchmark evaluation.
//!
//! A dataset is a set of (vulnerable, fixed) pairs. Besides the usual
//! per-sample metrics, pair accuracy counts a pair as correct only when the
//! vulnerable version is flagged and the fixed version is not.
//!
//! Samples whose detection failed are excluded together with their pair
//! and reported as a separate count.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::debate::{failures_path, BatchOutcome, DebateEngine, SampleResult};
use crate::jsonl::{read_records, write_records, JsonlError};
use crate::model::{validate_samples, CodeSample, Label, ModelError, SampleRecord, Verdict};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Parse(#[from] JsonlError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sample `{id}` has no partner{}", .pair_id.as_ref().map(|p| format!(" in pair `{p}`")).unwrap_or_default())]
    UnpairedSample { id: String, pair_id: Option<String> },
    #[error("pair `{pair_id}`: {reason}")]
    LabelConflict { pair_id: String, reason: String },
    #[error("dataset has no pairs")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePair {
    pub pair_id: String,
    pub vuln_sample_id: String,
    pub fixed_sample_id: String,
    /// Union of both samples' CWE ids, sorted.
    pub cwe_ids: Vec<String>,
}

/// Groups validated samples into pairs, in order of first appearance.
pub fn pair_samples(samples: &[CodeSample]) -> Result<Vec<SamplePair>, EvalError> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&CodeSample>> = HashMap::new();
    for s in samples {
        let pair_id = s
            .pair_id
            .as_deref()
            .ok_or_else(|| EvalError::UnpairedSample {
                id: s.id.clone(),
                pair_id: None,
            })?;
        let group = groups.entry(pair_id).or_default();
        if group.is_empty() {
            order.push(pair_id);
        }
        group.push(s);
    }
    let mut pairs = Vec::with_capacity(order.len());
    for pair_id in order {
        let group = &groups[pair_id];
        if group.len() == 1 {
            return Err(EvalError::UnpairedSample {
                id: group[0].id.clone(),
                pair_id: Some(pair_id.to_owned()),
            });
        }
        let conflict = |reason: String| EvalError::LabelConflict {
            pair_id: pair_id.to_owned(),
            reason,
        };
        if group.len() > 2 {
            return Err(conflict(format!(
                "{} samples share this pair id",
                group.len()
            )));
        }
        let labels = (group[0].label, group[1].label);
        let (v, f) = match labels {
            (Label::Vulnerable, Label::Benign) => (group[0], group[1]),
            (Label::Benign, Label::Vulnerable) => (group[1], group[0]),
            (a, b) => return Err(conflict(format!("labels are {a:?} and {b:?}"))),
        };
        let mut cwe_ids: Vec<String> = v.cwe_ids.iter().chain(&f.cwe_ids).cloned().collect();
        cwe_ids.sort();
        cwe_ids.dedup();
        pairs.push(SamplePair {
            pair_id: pair_id.to_owned(),
            vuln_sample_id: v.id.clone(),
            fixed_sample_id: f.id.clone(),
            cwe_ids,
        });
    }
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(pairs)
}

pub fn load_paired_dataset(path: &Path) -> Result<(Vec<CodeSample>, Vec<SamplePair>), EvalError> {
    let records = read_records::<SampleRecord>(path)?
        .into_iter()
        .map(|(_, r)| r);
    let samples = validate_samples(records)?;
    let pairs = pair_samples(&samples)?;
    Ok((samples, pairs))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedPrediction {
    pub pair_id: String,
    pub vuln_sample_id: String,
    pub fixed_sample_id: String,
    /// Meaningless when `vuln_failed`.
    pub y_hat_v: Verdict,
    /// Meaningless when `fixed_failed`.
    pub y_hat_f: Verdict,
    #[serde(default)]
    pub vuln_failed: bool,
    #[serde(default)]
    pub fixed_failed: bool,
    #[serde(default)]
    pub cwe_ids: Vec<String>,
}

impl PairedPrediction {
    pub fn new(pair_id: impl Into<String>, y_hat_v: Verdict, y_hat_f: Verdict) -> Self {
        let pair_id = pair_id.into();
        Self {
            vuln_sample_id: format!("{pair_id}/v"),
            fixed_sample_id: format!("{pair_id}/f"),
            pair_id,
            y_hat_v,
            y_hat_f,
            vuln_failed: false,
            fixed_failed: false,
            cwe_ids: Vec::new(),
        }
    }

    pub fn failed(&self) -> bool {
        self.vuln_failed || self.fixed_failed
    }

    pub fn pair_correct(&self) -> bool {
        self.y_hat_v == Verdict::Vulnerable && self.y_hat_f == Verdict::Benign
    }
}

/// Joins pairs with detection results; a sample without a transcript counts
/// as failed.
pub fn predictions_from_results(
    pairs: &[SamplePair],
    results: &[SampleResult],
) -> Vec<PairedPrediction> {
    let verdicts: HashMap<&str, Verdict> = results
        .iter()
        .filter_map(|r| r.transcript())
        .map(|t| (t.sample_id.as_str(), t.final_verdict.verdict))
        .collect();
    pairs
        .iter()
        .map(|p| {
            let v = verdicts.get(p.vuln_sample_id.as_str()).copied();
            let f = verdicts.get(p.fixed_sample_id.as_str()).copied();
            PairedPrediction {
                pair_id: p.pair_id.clone(),
                vuln_sample_id: p.vuln_sample_id.clone(),
                fixed_sample_id: p.fixed_sample_id.clone(),
                y_hat_v: v.unwrap_or(Verdict::Benign),
                y_hat_f: f.unwrap_or(Verdict::Benign),
                vuln_failed: v.is_none(),
                fixed_failed: f.is_none(),
                cwe_ids: p.cwe_ids.clone(),
            }
        })
        .collect()
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Fraction of non-failed pairs predicted (vulnerable, benign); 0 when no
/// pair is usable.
pub fn pair_accuracy(preds: &[PairedPrediction]) -> f64 {
    let usable: Vec<_> = preds.iter().filter(|p| !p.failed()).collect();
    ratio(
        usable.iter().filter(|p| p.pair_correct()).count(),
        usable.len(),
    )
    .unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Pairs scored.
    pub pairs: usize,
    /// Pairs excluded because a sample failed.
    pub excluded_pairs: usize,
    /// Individual samples whose detection failed.
    pub failed_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CweRow {
    pub cwe: String,
    /// Samples carrying this CWE.
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pair_acc: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub counts: Counts,
    /// Metrics whose denominator was zero and that were reported as 0.
    #[serde(default)]
    pub guarded: Vec<String>,
    /// Sorted by descending count, then CWE id.
    #[serde(default)]
    pub per_cwe: Vec<CweRow>,
}

impl MetricsReport {
    /// The `n` most frequent CWE rows.
    pub fn top_cwes(&self, n: usize) -> &[CweRow] {
        &self.per_cwe[..n.min(self.per_cwe.len())]
    }
}

/// Scores the `2·|P|` individual samples of all non-failed pairs.
pub fn classification_metrics(preds: &[PairedPrediction]) -> MetricsReport {
    let mut c = Counts::default();
    let mut cwe: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for p in preds {
        c.failed_samples += usize::from(p.vuln_failed) + usize::from(p.fixed_failed);
        if p.failed() {
            c.excluded_pairs += 1;
            continue;
        }
        c.pairs += 1;
        let v_ok = p.y_hat_v == Verdict::Vulnerable;
        let f_ok = p.y_hat_f == Verdict::Benign;
        if v_ok {
            c.tp += 1
        } else {
            c.fn_ += 1
        }
        if f_ok {
            c.tn += 1
        } else {
            c.fp += 1
        }
        for id in &p.cwe_ids {
            let row = cwe.entry(id).or_default();
            row.0 += 2;
            row.1 += usize::from(v_ok) + usize::from(f_ok);
        }
    }
    let mut guarded = Vec::new();
    let mut guard = |name: &str, value: Option<f64>| {
        value.unwrap_or_else(|| {
            guarded.push(name.to_owned());
            0.0
        })
    };
    let total = c.tp + c.fp + c.tn + c.fn_;
    let pair_acc = guard(
        "pair_acc",
        ratio(
            preds
                .iter()
                .filter(|p| !p.failed() && p.pair_correct())
                .count(),
            c.pairs,
        ),
    );
    let accuracy = guard("accuracy", ratio(c.tp + c.tn, total));
    let precision = guard("precision", ratio(c.tp, c.tp + c.fp));
    let recall = guard("recall", ratio(c.tp, c.tp + c.fn_));
    let f1 = guard(
        "f1",
        (precision + recall > 0.0).then(|| 2.0 * precision * recall / (precision + recall)),
    );
    let fpr = guard("fpr", ratio(c.fp, c.fp + c.tn));
    let mut per_cwe: Vec<CweRow> = cwe
        .into_iter()
        .map(|(id, (count, correct))| CweRow {
            cwe: id.to_owned(),
            count,
            correct,
            accuracy: correct as f64 / count as f64,
        })
        .collect();
    per_cwe.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.cwe.cmp(&b.cwe)));
    MetricsReport {
        pair_acc,
        accuracy,
        precision,
        recall,
        f1,
        fpr,
        counts: c,
        guarded,
        per_cwe,
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine<'a> {
    Summary {
        #[serde(skip_serializing_if = "Option::is_none")]
        t_max: Option<u32>,
        #[serde(flatten)]
        report: SummaryFields<'a>,
    },
    Cwe {
        #[serde(skip_serializing_if = "Option::is_none")]
        t_max: Option<u32>,
        #[serde(flatten)]
        row: &'a CweRow,
    },
}

#[derive(Serialize)]
struct SummaryFields<'a> {
    pair_acc: f64,
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    fpr: f64,
    counts: &'a Counts,
    guarded: &'a [String],
}

fn report_lines(t_max: Option<u32>, r: &MetricsReport) -> Vec<String> {
    let mut lines = vec![crate::jsonl::to_line(&ReportLine::Summary {
        t_max,
        report: SummaryFields {
            pair_acc: r.pair_acc,
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            fpr: r.fpr,
            counts: &r.counts,
            guarded: &r.guarded,
        },
    })];
    lines.extend(
        r.per_cwe
            .iter()
            .map(|row| crate::jsonl::to_line(&ReportLine::Cwe { t_max, row })),
    );
    lines
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Aligned plain-text rendering of a report.
pub fn render_report(r: &MetricsReport, top_n: usize) -> String {
    let c = &r.counts;
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>8}", "metric", "value(%)");
    for (name, v) in [
        ("PairAcc", r.pair_acc),
        ("Accuracy", r.accuracy),
        ("Precision", r.precision),
        ("Recall", r.recall),
        ("F1", r.f1),
        ("FPR", r.fpr),
    ] {
        let _ = writeln!(s, "{name:<10} {:>8}", pct(v));
    }
    let _ = writeln!(
        s,
        "\npairs={} excluded_pairs={} failed_samples={} TP={} FP={} TN={} FN={}",
        c.pairs, c.excluded_pairs, c.failed_samples, c.tp, c.fp, c.tn, c.fn_
    );
    if !r.guarded.is_empty() {
        let _ = writeln!(
            s,
            "zero denominators (reported as 0): {}",
            r.guarded.join(", ")
        );
    }
    if !r.per_cwe.is_empty() {
        let width = r
            .per_cwe
            .iter()
            .map(|row| row.cwe.len())
            .max()
            .unwrap_or(3)
            .max(3);
        let _ = writeln!(s, "\n{:<width$} {:>6} {:>8}", "CWE", "count", "acc(%)");
        for row in r.top_cwes(top_n) {
            let _ = writeln!(
                s,
                "{:<width$} {:>6} {:>8}",
                row.cwe,
                row.count,
                pct(row.accuracy)
            );
        }
    }
    s
}

/// Aligned table with one row per round limit.
pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:>5} {:>8} {:>8} {:>9} {:>8} {:>8} {:>8} {:>7}\n",
        "t_max", "PairAcc", "Acc", "Precision", "Recall", "F1", "FPR", "failed"
    );
    for row in rows {
        let r = &row.report;
        let _ = writeln!(
            s,
            "{:>5} {:>8} {:>8} {:>9} {:>8} {:>8} {:>8} {:>7}",
            row.t_max,
            pct(r.pair_acc),
            pct(r.accuracy),
            pct(r.precision),
            pct(r.recall),
            pct(r.f1),
            pct(r.fpr),
            r.counts.failed_samples
        );
    }
    s
}

pub const DEFAULT_TOP_CWES: usize = 10;

/// Writes `report.jsonl` (a summary line then one line per CWE) and the
/// aligned `report.txt`.
pub fn write_report(dir: &Path, report: &MetricsReport) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut lines = report_lines(None, report).join("\n");
    lines.push('\n');
    fs::write(dir.join("report.jsonl"), lines)?;
    fs::write(
        dir.join("report.txt"),
        render_report(report, DEFAULT_TOP_CWES),
    )
}

#[derive(Serialize)]
struct TimingLine<'a> {
    sample_id: &'a str,
    elapsed_ms: u128,
}

/// Per-sample wall-clock times, kept apart from transcripts so those stay
/// reproducible.
pub fn write_timings(path: &Path, batch: &BatchOutcome) -> io::Result<()> {
    let lines: Vec<TimingLine> = batch
        .results
        .iter()
        .zip(&batch.elapsed)
        .map(|(r, d)| TimingLine {
            sample_id: r.sample_id(),
            elapsed_ms: d.as_millis(),
        })
        .collect();
    write_records(path, &lines)
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: MetricsReport,
    pub predictions: Vec<PairedPrediction>,
    pub batch: BatchOutcome,
}

impl EvalRun {
    pub fn failed_samples(&self) -> usize {
        self.batch.failures().len()
    }
}

/// Detects every sample, scores the pairs, and (with `out`) writes
/// transcripts, failures, predictions, timings and reports into `out`.
pub fn evaluate(
    engine: &DebateEngine,
    samples: &[CodeSample],
    pairs: &[SamplePair],
    parallelism: usize,
    out: Option<&Path>,
) -> Result<EvalRun, EvalError> {
    let transcripts = out.map(|d| d.join("transcripts.jsonl"));
    let batch = engine.run_batch(samples, parallelism, transcripts.as_deref())?;
    let predictions = predictions_from_results(pairs, &batch.results);
    let report = classification_metrics(&predictions);
    if let Some(dir) = out {
        write_records(&dir.join("predictions.jsonl"), &predictions)?;
        write_timings(&dir.join("timings.jsonl"), &batch)?;
        write_report(dir, &report)?;
    }
    Ok(EvalRun {
        report,
        predictions,
        batch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t_max: u32,
    pub report: MetricsReport,
}

/// Runs a full evaluation per round limit. All arms share the engine's
/// backends, so a caching backend computes each repeated prompt once.
///
/// With `out`, each arm gets its own `t<N>` subdirectory and the summary
/// goes to `sweep.jsonl` and `sweep.txt`.
pub fn sweep_rounds(
    engine: &DebateEngine,
    samples: &[CodeSample],
    pairs: &[SamplePair],
    t_values: &[u32],
    parallelism: usize,
    out: Option<&Path>,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let arm = engine.clone().with_t_max(t);
        let dir = out.map(|d| d.join(format!("t{t}")));
        let run = evaluate(&arm, samples, pairs, parallelism, dir.as_deref())?;
        rows.push(SweepRow {
            t_max: t,
            report: run.report,
        });
    }
    if let Some(dir) = out {
        let mut lines: Vec<String> = rows
            .iter()
            .flat_map(|r| report_lines(Some(r.t_max), &r.report))
            .collect();
        lines.push(String::new());
        fs::write(dir.join("sweep.jsonl"), lines.join("\n"))?;
        fs::write(dir.join("sweep.txt"), render_sweep(&rows))?;
    }
    Ok(rows)
}

/// Path of the failure records written beside `transcripts.jsonl` in `dir`.
pub fn run_failures_path(dir: &Path) -> std::path::PathBuf {
    failures_path(&dir.join("transcripts.jsonl"))
}
