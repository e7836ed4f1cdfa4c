//! PR-AUC, AUT and run reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::MlpModel;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrCurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Samples ranked by score descending, ties kept in index order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

fn check_inputs(scores: &[f64], labels: &[u8], positive: u8) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::dims(
            format!("{} labels", scores.len()),
            labels.len(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidMatrix("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == positive).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateLabels);
    }
    Ok(pos)
}

/// Precision/recall after each ranked sample.
pub fn pr_curve(scores: &[f64], labels: &[u8], positive: u8) -> Result<Vec<PrCurvePoint>> {
    let pos = check_inputs(scores, labels, positive)?;
    let mut tp = 0usize;
    Ok(ranking(scores)
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            tp += (labels[i] == positive) as usize;
            PrCurvePoint {
                threshold: scores[i],
                precision: tp as f64 / (k + 1) as f64,
                recall: tp as f64 / pos as f64,
            }
        })
        .collect())
}

/// Average precision: the sum over recall increments of the precision at
/// that rank.
pub fn pr_auc(scores: &[f64], labels: &[u8], positive: u8) -> Result<f64> {
    let pos = check_inputs(scores, labels, positive)?;
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, i) in ranking(scores).into_iter().enumerate() {
        if labels[i] == positive {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// Trapezoidal mean of a series over equally spaced tasks.
pub fn aut(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientPoints(n));
    }
    let s: f64 = values.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum();
    Ok(s / (n - 1) as f64)
}

/// Share of labels produced by the model, in percent.
pub fn savings_pct(model_labeled: usize, analyst_labeled: usize) -> f64 {
    let total = model_labeled + analyst_labeled;
    if total == 0 {
        0.0
    } else {
        100.0 * model_labeled as f64 / total as f64
    }
}

/// One decimal, truncated (46.59 -> "46.5").
pub fn format_pct(pct: f64) -> String {
    format!("{:.1}", (pct * 10.0 + 1e-9).floor() / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: usize,
    pub seen: bool,
    /// `None` when the task's test split holds a single class.
    pub pr_auc_attack: Option<f64>,
    pub pr_auc_benign: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingSummary {
    pub task_id: usize,
    pub pool_size: usize,
    pub expected_cir: f64,
    pub target_attack: f64,
    pub target_benign: f64,
    pub model_attack: usize,
    pub model_benign: usize,
    pub analyst_attack: usize,
    pub analyst_benign: usize,
    pub analyst_shortfall_attack: usize,
    pub analyst_shortfall_benign: usize,
    /// Fraction of model-assigned labels equal to the hidden truth.
    pub model_label_precision: Option<f64>,
    pub savings_pct: f64,
}

impl LabelingSummary {
    pub fn model_labeled(&self) -> usize {
        self.model_attack + self.model_benign
    }

    pub fn analyst_labeled(&self) -> usize {
        self.analyst_attack + self.analyst_benign
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutPair {
    pub attack: Option<f64>,
    pub benign: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub seen_count: usize,
    pub tasks: Vec<TaskMetrics>,
    pub aut_seen: AutPair,
    pub aut_unseen: AutPair,
    pub aut_overall: AutPair,
    pub labeling: Vec<LabelingSummary>,
    /// Overall model share of labels across unseen tasks, percent.
    pub savings_pct: Option<f64>,
    /// Metrics of every task after each training step, when requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<Vec<TaskMetrics>>,
}

fn aut_of(series: &[&TaskMetrics], pick: impl Fn(&TaskMetrics) -> Option<f64>) -> Option<f64> {
    let values: Option<Vec<f64>> = series.iter().map(|m| pick(m)).collect();
    values.and_then(|v| aut(&v).ok())
}

fn aut_pair(series: &[&TaskMetrics]) -> AutPair {
    AutPair {
        attack: aut_of(series, |m| m.pr_auc_attack),
        benign: aut_of(series, |m| m.pr_auc_benign),
    }
}

/// Build a report from final per-task metrics (ordered by task id).
pub fn aggregate(
    tasks: Vec<TaskMetrics>,
    seen_count: usize,
    labeling: Vec<LabelingSummary>,
    seed: u64,
    config_hash: String,
) -> EvalReport {
    let all: Vec<&TaskMetrics> = tasks.iter().collect();
    let split = seen_count.min(all.len());
    let (seen, unseen) = all.split_at(split);
    let model: usize = labeling.iter().map(LabelingSummary::model_labeled).sum();
    let analyst: usize = labeling.iter().map(LabelingSummary::analyst_labeled).sum();
    EvalReport {
        version: REPORT_VERSION,
        seed,
        config_hash,
        seen_count,
        aut_seen: aut_pair(seen),
        aut_unseen: aut_pair(unseen),
        aut_overall: aut_pair(&all),
        savings_pct: (!labeling.is_empty()).then(|| savings_pct(model, analyst)),
        labeling,
        tasks,
        history: Vec::new(),
    }
}

/// PR-AUC of both classes on one test split.
pub fn evaluate_split(
    model: &MlpModel,
    features: &Matrix,
    labels: &[u8],
    task_id: usize,
    seen: bool,
) -> Result<TaskMetrics> {
    let (attack, benign) = if features.rows() == 0 {
        (None, None)
    } else {
        let probs = model.predict_proba(features)?;
        let p_attack: Vec<f64> = (0..probs.rows()).map(|i| probs[(i, 1)]).collect();
        let p_benign: Vec<f64> = (0..probs.rows()).map(|i| probs[(i, 0)]).collect();
        (
            optional(pr_auc(&p_attack, labels, 1))?,
            optional(pr_auc(&p_benign, labels, 0))?,
        )
    };
    Ok(TaskMetrics {
        task_id,
        seen,
        pr_auc_attack: attack,
        pr_auc_benign: benign,
    })
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateLabels) => Ok(None),
        Err(e) => Err(e),
    }
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::data::write_json(self, path)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// `task_id,seen,pr_auc_attack,pr_auc_benign`; empty cells for undefined values.
    pub fn write_task_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["task_id", "seen", "pr_auc_attack", "pr_auc_benign"])
            .map_err(csv_err)?;
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for t in &self.tasks {
            w.write_record([
                t.task_id.to_string(),
                t.seen.to_string(),
                cell(t.pr_auc_attack),
                cell(t.pr_auc_benign),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

/// Report fields summarized across seeds, in display order.
pub const SUMMARY_FIELDS: [&str; 7] = [
    "aut_seen_a",
    "aut_seen_b",
    "aut_unseen_a",
    "aut_unseen_b",
    "aut_overall_a",
    "aut_overall_b",
    "savings_pct",
];

impl EvalReport {
    pub fn field(&self, name: &str) -> Option<f64> {
        match name {
            "aut_seen_a" => self.aut_seen.attack,
            "aut_seen_b" => self.aut_seen.benign,
            "aut_unseen_a" => self.aut_unseen.attack,
            "aut_unseen_b" => self.aut_unseen.benign,
            "aut_overall_a" => self.aut_overall.attack,
            "aut_overall_b" => self.aut_overall.benign,
            "savings_pct" => self.savings_pct,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Parallel to `SUMMARY_FIELDS`; `None` when no report defines the field.
    pub stats: Vec<Option<Stat>>,
}

/// Group reports by config hash (first-seen order) and summarize each group.
/// Reports with a different format version are rejected.
pub fn summarize(reports: &[(String, EvalReport)]) -> Result<Vec<SummaryRow>> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::EmptyInput("no reports to summarize".into()));
    };
    if let Some((label, r)) = reports.iter().find(|(_, r)| r.version != first.version) {
        return Err(Error::Schema(format!(
            "report {label} has version {}, expected {}",
            r.version, first.version
        )));
    }
    let mut rows: Vec<(SummaryRow, Vec<&EvalReport>)> = Vec::new();
    for (label, r) in reports {
        match rows
            .iter_mut()
            .find(|(row, _)| row.config_hash == r.config_hash)
        {
            Some((row, members)) => {
                row.seeds.push(r.seed);
                members.push(r);
            }
            None => rows.push((
                SummaryRow {
                    label: label.clone(),
                    config_hash: r.config_hash.clone(),
                    seeds: vec![r.seed],
                    stats: Vec::new(),
                },
                vec![r],
            )),
        }
    }
    Ok(rows
        .into_iter()
        .map(|(mut row, members)| {
            row.stats = SUMMARY_FIELDS
                .iter()
                .map(|f| {
                    let v: Vec<f64> = members.iter().filter_map(|r| r.field(f)).collect();
                    mean_std(&v).map(|(mean, std)| Stat {
                        mean,
                        std,
                        n: v.len(),
                    })
                })
                .collect();
            row
        })
        .collect())
}
