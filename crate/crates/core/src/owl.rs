//! Open-world labeling of unseen tasks.
//!
//! Confident model predictions are capped by the expected class balance,
//! checked against a cosine-distance majority vote over the replay buffer,
//! and a fraction of the survivors become labels. A simulated analyst fills
//! the rest of the labeling budget from the hidden ground truth.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, TaskDataset};
use crate::error::{Error, Result};
use crate::eval::{savings_pct, LabelingSummary};
use crate::linalg::Matrix;
use crate::memory::BufferMemory;
use crate::nn::MlpModel;
use crate::{par, SoulRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalystStrategy {
    Uniform,
    /// Prefer samples the model is least confident about.
    LowConfidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OwlConfig {
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub c_d: f64,
    pub vote_threshold: f64,
    pub ratio: f64,
    /// Weight of the current agreement fraction against the running one.
    pub blend_weight: f64,
    pub analyst: AnalystStrategy,
}

impl Default for OwlConfig {
    fn default() -> Self {
        OwlConfig {
            gamma_a: 0.9,
            gamma_b: 0.9,
            c_d: 0.1,
            vote_threshold: 0.98,
            ratio: 0.2,
            blend_weight: 0.5,
            analyst: AnalystStrategy::Uniform,
        }
    }
}

impl OwlConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        for (name, g) in [("gamma_a", self.gamma_a), ("gamma_b", self.gamma_b)] {
            if !(0.9..1.0).contains(&g) {
                return err(format!("{name} = {g} outside [0.9, 1)"));
            }
        }
        if !(self.c_d > 0.0 && self.c_d <= 2.0) {
            return err(format!("c_d = {} outside (0, 2]", self.c_d));
        }
        if !(self.vote_threshold > 0.5 && self.vote_threshold <= 1.0) {
            return err(format!(
                "vote_threshold = {} outside (0.5, 1]",
                self.vote_threshold
            ));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return err(format!("ratio = {} outside (0, 1)", self.ratio));
        }
        if !(0.0..=1.0).contains(&self.blend_weight) {
            return err(format!(
                "blend_weight = {} outside [0, 1]",
                self.blend_weight
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeenTaskStats {
    pub cir_history: Vec<f64>,
    /// `None` until the first agreement estimate.
    pub rho_a: Option<f64>,
    pub rho_b: Option<f64>,
}

impl SeenTaskStats {
    pub fn record_cir(&mut self, cir: f64) {
        self.cir_history.push(cir);
    }

    /// Mean CIR of the seen tasks.
    pub fn expected_cir(&self) -> Option<f64> {
        if self.cir_history.is_empty() {
            None
        } else {
            Some(self.cir_history.iter().sum::<f64>() / self.cir_history.len() as f64)
        }
    }

    /// Fold in a new per-class agreement estimate.
    pub fn blend(&mut self, current_a: f64, current_b: f64, weight: f64) {
        self.rho_a = Some(blend(self.rho_a, current_a, weight));
        self.rho_b = Some(blend(self.rho_b, current_b, weight));
    }
}

/// `weight * current + (1 - weight) * prior`; the first estimate is taken as is.
pub fn blend(prior: Option<f64>, current: f64, weight: f64) -> f64 {
    match prior {
        Some(p) => weight * current + (1.0 - weight) * p,
        None => current,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub label: u8,
    pub confidence: f64,
}

/// Argmax label with ties going to benign, and the winning probability.
pub fn pseudo_label(p_benign: f64, p_attack: f64) -> (u8, f64) {
    if p_attack > p_benign {
        (1, p_attack)
    } else {
        (0, p_benign)
    }
}

pub fn pseudo_labels(model: &MlpModel, inputs: &Matrix) -> Result<Vec<u8>> {
    let probs = model.predict_proba(inputs)?;
    Ok((0..probs.rows())
        .map(|i| pseudo_label(probs[(i, 0)], probs[(i, 1)]).0)
        .collect())
}

/// Pseudo-label every sample; keep those whose winning probability exceeds
/// the class gate. Each set is sorted by confidence, highest first.
pub fn partition_by_confidence(
    model: &MlpModel,
    unlabeled: &Matrix,
    cfg: &OwlConfig,
) -> Result<(Vec<Candidate>, Vec<Candidate>)> {
    if unlabeled.rows() == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let probs = model.predict_proba(unlabeled)?;
    Ok(partition_probs(&probs, cfg))
}

fn partition_probs(probs: &Matrix, cfg: &OwlConfig) -> (Vec<Candidate>, Vec<Candidate>) {
    let (mut top_a, mut top_b) = (Vec::new(), Vec::new());
    for i in 0..probs.rows() {
        let (label, confidence) = pseudo_label(probs[(i, 0)], probs[(i, 1)]);
        let c = Candidate {
            index: i,
            label,
            confidence,
        };
        match label {
            1 if confidence > cfg.gamma_a => top_a.push(c),
            0 if confidence > cfg.gamma_b => top_b.push(c),
            _ => {}
        }
    }
    for set in [&mut top_a, &mut top_b] {
        set.sort_by(|x, y| y.confidence.total_cmp(&x.confidence));
    }
    (top_a, top_b)
}

/// Caps `floor(r * pi * n)` attack and `floor(r * (1 - pi) * n)` benign.
pub fn cir_caps(pi: f64, ratio: f64, task_size: usize) -> (usize, usize) {
    let n = task_size as f64;
    (
        (ratio * pi * n).floor() as usize,
        (ratio * (1.0 - pi) * n).floor() as usize,
    )
}

pub fn truncate_by_cir(
    mut top_a: Vec<Candidate>,
    mut top_b: Vec<Candidate>,
    pi: f64,
    ratio: f64,
    task_size: usize,
) -> (Vec<Candidate>, Vec<Candidate>) {
    let (cap_a, cap_b) = cir_caps(pi, ratio, task_size);
    top_a.truncate(cap_a);
    top_b.truncate(cap_b);
    (top_a, top_b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Attack,
    Benign,
    Unknown,
}

impl Vote {
    pub fn label(self) -> Option<u8> {
        match self {
            Vote::Attack => Some(1),
            Vote::Benign => Some(0),
            Vote::Unknown => None,
        }
    }
}

/// Vote and the share of neighbors carrying the winning label (0 when there
/// are no neighbors).
pub fn majority_vote(x: &[f64], memory: &BufferMemory, cfg: &OwlConfig) -> Result<(Vote, f64)> {
    let neighbors = memory.vote_neighbors(x, cfg.c_d)?;
    if neighbors.is_empty() {
        return Ok((Vote::Unknown, 0.0));
    }
    let attack = neighbors.iter().filter(|n| n.label == 1).count() as f64;
    let total = neighbors.len() as f64;
    let (share_a, share_b) = (attack / total, 1.0 - attack / total);
    Ok(if share_a >= cfg.vote_threshold {
        (Vote::Attack, share_a)
    } else if share_b >= cfg.vote_threshold {
        (Vote::Benign, share_b)
    } else {
        (Vote::Unknown, share_a.max(share_b))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreed {
    pub candidate: Candidate,
    pub vote_share: f64,
}

/// Keep candidates whose vote matches their pseudo-label. Rows of `features`
/// are indexed by `Candidate::index`.
pub fn agreement_filter(
    top_a: &[Candidate],
    top_b: &[Candidate],
    features: &Matrix,
    memory: &BufferMemory,
    cfg: &OwlConfig,
) -> Result<(Vec<Agreed>, Vec<Agreed>)> {
    let filter = |set: &[Candidate]| -> Result<Vec<Agreed>> {
        let votes = par::map(set, |c| majority_vote(features.row(c.index), memory, cfg));
        let mut out = Vec::new();
        for (c, v) in set.iter().zip(votes) {
            let (vote, share) = v?;
            if vote.label() == Some(c.label) {
                out.push(Agreed {
                    candidate: *c,
                    vote_share: share,
                });
            }
        }
        Ok(out)
    };
    Ok((filter(top_a)?, filter(top_b)?))
}

/// Per class (by pseudo-label): among gated samples, the fraction whose
/// pseudo-label, vote and ground truth all agree. A class with no gated
/// samples scores 0.
pub fn current_agreement(
    model: &MlpModel,
    labeled: &LabeledSet,
    memory: &BufferMemory,
    cfg: &OwlConfig,
) -> Result<(f64, f64)> {
    if labeled.is_empty() {
        return Err(Error::EmptyInput("no labeled samples for agreement".into()));
    }
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let (top_a, top_b) = partition_by_confidence(model, &labeled.features, cfg)?;
    let (s_a, s_b) = agreement_filter(&top_a, &top_b, &labeled.features, memory, cfg)?;
    let fraction = |gated: &[Candidate], agreed: &[Agreed]| {
        if gated.is_empty() {
            0.0
        } else {
            let ok = agreed
                .iter()
                .filter(|a| labeled.labels[a.candidate.index] == a.candidate.label)
                .count();
            ok as f64 / gated.len() as f64
        }
    };
    Ok((fraction(&top_a, &s_a), fraction(&top_b, &s_b)))
}

/// Round half away from zero for non-negative budgets, clamped at 0.
pub fn budget(target: f64, self_labeled: f64) -> usize {
    let v = target - self_labeled;
    if v <= 0.0 {
        0
    } else {
        (v + 0.5).floor() as usize
    }
}

/// Up to `need_a` true attacks and `need_b` true benign from `pool`, drawn
/// uniformly (seeded) or lowest-confidence first. `pool` holds indices into
/// `labels`; `confidence` is indexed the same way as `labels`.
pub fn simulated_analyst(
    pool: &[usize],
    labels: &[u8],
    confidence: &[f64],
    need_a: usize,
    need_b: usize,
    strategy: AnalystStrategy,
    rng: &mut SoulRng,
) -> Vec<(usize, u8)> {
    let mut out = Vec::new();
    for (class, need) in [(1u8, need_a), (0u8, need_b)] {
        let mut cands: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&i| labels[i] == class)
            .collect();
        let take = need.min(cands.len());
        match strategy {
            AnalystStrategy::Uniform => {
                let picks = index::sample(rng, cands.len(), take).into_vec();
                out.extend(picks.into_iter().map(|k| (cands[k], class)));
            }
            AnalystStrategy::LowConfidence => {
                cands.shuffle(rng);
                cands.sort_by(|&x, &y| confidence[x].total_cmp(&confidence[y]));
                out.extend(cands[..take].iter().map(|&i| (i, class)));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Model,
    Analyst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    /// Row in the task's unlabeled pool.
    pub index: usize,
    pub label: u8,
    pub source: LabelSource,
    pub confidence: f64,
    pub vote_share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingOutcome {
    pub task_id: usize,
    pub model_labeled: Vec<LabelEntry>,
    pub analyst_labeled: Vec<LabelEntry>,
    pub remaining_unlabeled: Vec<usize>,
    pub summary: LabelingSummary,
}

impl LabelingOutcome {
    pub fn savings_pct(&self) -> f64 {
        self.summary.savings_pct
    }

    /// `index,label,source,confidence,vote_share`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["index", "label", "source", "confidence", "vote_share"])
            .map_err(csv_err)?;
        for e in self.model_labeled.iter().chain(&self.analyst_labeled) {
            let source = match e.source {
                LabelSource::Model => "model",
                LabelSource::Analyst => "analyst",
            };
            w.write_record([
                e.index.to_string(),
                e.label.to_string(),
                source.to_string(),
                e.confidence.to_string(),
                e.vote_share.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Label part of an unseen task's unlabeled pool. Returns the outcome and the
/// task rewritten with `labeled` = assigned labels, `unlabeled` = the rest.
pub fn label_unseen_task(
    model: &MlpModel,
    task: &TaskDataset,
    memory: &BufferMemory,
    stats: &SeenTaskStats,
    cfg: &OwlConfig,
    rng: &mut SoulRng,
) -> Result<(LabelingOutcome, TaskDataset)> {
    cfg.validate()?;
    let pi = stats
        .expected_cir()
        .ok_or_else(|| Error::Task("no seen-task statistics for open-world labeling".into()))?;
    let pool = &task.unlabeled;
    let n = pool.len();
    if n == 0 {
        return Err(Error::EmptyTask(task.task_id));
    }
    let probs = model.predict_proba(&pool.features)?;
    let confidence: Vec<f64> = (0..n)
        .map(|i| pseudo_label(probs[(i, 0)], probs[(i, 1)]).1)
        .collect();
    let (top_a, top_b) = partition_probs(&probs, cfg);
    let (top_a, top_b) = truncate_by_cir(top_a, top_b, pi, cfg.ratio, n);
    let (s_a, s_b) = if memory.is_empty() {
        log::warn!(
            "task {}: buffer memory empty, no model labels",
            task.task_id
        );
        (Vec::new(), Vec::new())
    } else {
        agreement_filter(&top_a, &top_b, &pool.features, memory, cfg)?
    };

    let rho_a = stats.rho_a.unwrap_or(0.0);
    let rho_b = stats.rho_b.unwrap_or(0.0);
    let mut model_labeled = Vec::new();
    for (set, rho) in [(&s_a, rho_a), (&s_b, rho_b)] {
        let k = budget(rho * set.len() as f64, 0.0).min(set.len());
        let mut picks = index::sample(rng, set.len(), k).into_vec();
        picks.sort_unstable();
        model_labeled.extend(picks.into_iter().map(|p| LabelEntry {
            index: set[p].candidate.index,
            label: set[p].candidate.label,
            source: LabelSource::Model,
            confidence: set[p].candidate.confidence,
            vote_share: Some(set[p].vote_share),
        }));
    }

    let target_a = cfg.ratio * pi * n as f64;
    let target_b = cfg.ratio * (1.0 - pi) * n as f64;
    let need_a = budget(target_a, rho_a * s_a.len() as f64);
    let need_b = budget(target_b, rho_b * s_b.len() as f64);
    let mut taken = vec![false; n];
    for e in &model_labeled {
        taken[e.index] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    let analyst_picks = simulated_analyst(
        &free,
        &pool.labels,
        &confidence,
        need_a,
        need_b,
        cfg.analyst,
        rng,
    );
    let mut analyst_labeled: Vec<LabelEntry> = analyst_picks
        .into_iter()
        .map(|(index, label)| LabelEntry {
            index,
            label,
            source: LabelSource::Analyst,
            confidence: confidence[index],
            vote_share: None,
        })
        .collect();
    analyst_labeled.sort_by_key(|e| e.index);
    for e in &analyst_labeled {
        taken[e.index] = true;
    }
    let remaining_unlabeled: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();

    let count = |v: &[LabelEntry], l: u8| v.iter().filter(|e| e.label == l).count();
    let (analyst_a, analyst_b) = (count(&analyst_labeled, 1), count(&analyst_labeled, 0));
    let correct = model_labeled
        .iter()
        .filter(|e| pool.labels[e.index] == e.label)
        .count();
    let summary = LabelingSummary {
        task_id: task.task_id,
        pool_size: n,
        expected_cir: pi,
        target_attack: target_a,
        target_benign: target_b,
        model_attack: count(&model_labeled, 1),
        model_benign: count(&model_labeled, 0),
        analyst_attack: analyst_a,
        analyst_benign: analyst_b,
        analyst_shortfall_attack: need_a - analyst_a,
        analyst_shortfall_benign: need_b - analyst_b,
        model_label_precision: (!model_labeled.is_empty())
            .then(|| correct as f64 / model_labeled.len() as f64),
        savings_pct: savings_pct(model_labeled.len(), analyst_labeled.len()),
    };
    if summary.analyst_shortfall_attack + summary.analyst_shortfall_benign > 0 {
        log::warn!(
            "task {}: analyst short by {} attack / {} benign labels",
            task.task_id,
            summary.analyst_shortfall_attack,
            summary.analyst_shortfall_benign
        );
    }

    let mut assigned: Vec<(usize, u8)> = model_labeled
        .iter()
        .chain(&analyst_labeled)
        .map(|e| (e.index, e.label))
        .collect();
    assigned.sort_unstable();
    let idx: Vec<usize> = assigned.iter().map(|(i, _)| *i).collect();
    let labeled = LabeledSet {
        features: pool.features.select_rows(&idx),
        labels: assigned.iter().map(|(_, l)| *l).collect(),
    };
    let labeled_task = TaskDataset {
        labeled,
        unlabeled: pool.select(&remaining_unlabeled),
        ..task.clone()
    };
    Ok((
        LabelingOutcome {
            task_id: task.task_id,
            model_labeled,
            analyst_labeled,
            remaining_unlabeled,
            summary,
        },
        labeled_task,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    fn probs(rows: &[(f64, f64)]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|(a, b)| [*a, *b]).collect::<Vec<_>>()).unwrap()
    }

    fn memory_of(rows: &[(Vec<f64>, u8)]) -> BufferMemory {
        let mut m = BufferMemory::new(1000);
        let feats: Vec<&[f64]> = rows.iter().map(|(f, _)| f.as_slice()).collect();
        let labels: Vec<u8> = rows.iter().map(|(_, l)| *l).collect();
        m.reorganize(
            &Matrix::from_rows(&feats).unwrap(),
            &labels,
            1,
            &mut rng_from_seed(0),
        )
        .unwrap();
        m
    }

    #[test]
    fn pseudo_label_ties_go_benign() {
        assert_eq!(pseudo_label(0.9, 0.1).0, 0);
        assert_eq!(pseudo_label(0.5, 0.5).0, 0);
        assert_eq!(pseudo_label(0.2, 0.8), (1, 0.8));
    }

    #[test]
    fn confidence_partition() {
        let cfg = OwlConfig::default();
        let (a, b) = partition_probs(
            &probs(&[(0.95, 0.05), (0.6, 0.4), (0.02, 0.98), (0.04, 0.96)]),
            &cfg,
        );
        assert_eq!(b.iter().map(|c| c.index).collect::<Vec<_>>(), vec![0]);
        assert_eq!(a.iter().map(|c| c.index).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn caps_arithmetic() {
        assert_eq!(cir_caps(0.02, 0.2, 1000), (4, 196));
        let few = vec![Candidate {
            index: 0,
            label: 1,
            confidence: 0.99,
        }];
        let (a, _) = truncate_by_cir(few.clone(), vec![], 0.02, 0.2, 1000);
        assert_eq!(a, few);
    }

    #[test]
    fn vote_rules() {
        let cfg = OwlConfig::default();
        let x = vec![1.0, 0.0];
        let all_attack = memory_of(&(0..5).map(|_| (vec![1.0, 0.01], 1)).collect::<Vec<_>>());
        assert_eq!(
            majority_vote(&x, &all_attack, &cfg).unwrap().0,
            Vote::Attack
        );
        let mut mixed: Vec<(Vec<f64>, u8)> =
            (0..3).map(|i| (vec![1.0, 0.01 * i as f64], 1)).collect();
        mixed.extend((0..2).map(|i| (vec![1.0, 0.02 + 0.01 * i as f64], 0)));
        assert_eq!(
            majority_vote(&x, &memory_of(&mixed), &cfg).unwrap().0,
            Vote::Unknown
        );
        let far = memory_of(&[(vec![0.0, 1.0], 1)]);
        assert_eq!(majority_vote(&x, &far, &cfg).unwrap(), (Vote::Unknown, 0.0));
    }

    #[test]
    fn agreement_filter_rules() {
        let cfg = OwlConfig::default();
        let mem = memory_of(&[(vec![1.0, 0.0], 1), (vec![0.0, 1.0], 0)]);
        let feats = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let c = |index, label| Candidate {
            index,
            label,
            confidence: 0.99,
        };
        let (s_a, s_b) =
            agreement_filter(&[c(0, 1), c(1, 1), c(2, 1)], &[c(1, 0)], &feats, &mem, &cfg).unwrap();
        assert_eq!(
            s_a.iter().map(|a| a.candidate.index).collect::<Vec<_>>(),
            vec![0]
        );
        assert_eq!(s_b.len(), 1);
    }

    #[test]
    fn blend_and_budget() {
        assert!((blend(Some(0.8), 0.4, 0.5) - 0.6).abs() < 1e-12);
        assert_eq!(blend(None, 0.4, 0.5), 0.4);
        assert_eq!(budget(10.5, 0.0), 11);
        assert_eq!(budget(10.49, 0.0), 10);
        assert_eq!(budget(3.0, 5.0), 0);
    }

    #[test]
    fn analyst_draws() {
        let labels = vec![1, 0, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1];
        let pool: Vec<usize> = (0..labels.len()).collect();
        let conf = vec![0.5; labels.len()];
        let mut rng = rng_from_seed(3);
        assert!(simulated_analyst(
            &pool,
            &labels,
            &conf,
            0,
            0,
            AnalystStrategy::Uniform,
            &mut rng
        )
        .is_empty());
        let picks = simulated_analyst(
            &pool,
            &labels,
            &conf,
            3,
            5,
            AnalystStrategy::Uniform,
            &mut rng,
        );
        assert_eq!(picks.iter().filter(|p| p.1 == 1).count(), 3);
        assert_eq!(picks.iter().filter(|p| p.1 == 0).count(), 2);
        assert!(picks.iter().all(|(i, l)| labels[*i] == *l));
        let again = simulated_analyst(
            &pool,
            &labels,
            &conf,
            3,
            5,
            AnalystStrategy::Uniform,
            &mut rng_from_seed(3),
        );
        let first = simulated_analyst(
            &pool,
            &labels,
            &conf,
            3,
            5,
            AnalystStrategy::Uniform,
            &mut rng_from_seed(3),
        );
        assert_eq!(again, first);
    }

    #[test]
    fn config_validation() {
        assert!(OwlConfig::default().validate().is_ok());
        assert!(OwlConfig {
            gamma_a: 0.8,
            ..OwlConfig::default()
        }
        .validate()
        .is_err());
        assert!(OwlConfig {
            vote_threshold: 0.5,
            ..OwlConfig::default()
        }
        .validate()
        .is_err());
        assert!(OwlConfig {
            c_d: 0.0,
            ..OwlConfig::default()
        }
        .validate()
        .is_err());
    }
}
