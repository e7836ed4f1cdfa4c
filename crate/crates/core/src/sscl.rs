//! Semi-supervised continual training.
//!
//! Each batch mixes replayed buffer samples, labeled rows of the current task
//! and unlabeled rows pseudo-labeled by a frozen teacher. The loss is
//! cross-entropy over the whole batch plus teacher-student distillation on the
//! unlabeled rows; gradients are projected through the GPM before the step.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, TaskDataset};
use crate::error::{Error, Result};
use crate::gpm::{GpmMemory, DEFAULT_ENERGY_THRESHOLD, DEFAULT_EXEMPLAR_COUNT};
use crate::linalg::Matrix;
use crate::memory::BufferMemory;
use crate::nn::{
    log_softmax_rows, EpochDecision, LossBreakdown, LossWeights, MlpModel, Mode, OptimizerState,
    TrainBatch,
};
use crate::owl::{current_agreement, pseudo_labels, OwlConfig, SeenTaskStats};
use crate::SoulRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub b: usize,
    pub b_m: usize,
    pub b_l: usize,
    pub b_u: usize,
}

impl BatchPlan {
    /// `b_l = round((b - b_m) * r)`, `b_u` takes the rest.
    pub fn new(b: usize, b_m: usize, ratio: f64) -> Result<Self> {
        if b == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if b_m > b {
            return Err(Error::Config(format!(
                "memory draw {b_m} exceeds batch size {b}"
            )));
        }
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!(
                "labeled ratio {ratio} outside [0, 1]"
            )));
        }
        let rem = b - b_m;
        let b_l = ((rem as f64) * ratio).round() as usize;
        Ok(BatchPlan {
            b,
            b_m,
            b_l,
            b_u: rem - b_l,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherRefresh {
    /// Teacher is the model as it was before the current step.
    PerBatch,
    /// Teacher is frozen at the start of each task.
    PerTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub memory_batch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub distill_weight: f64,
    pub teacher_refresh: TeacherRefresh,
    pub use_gpm: bool,
    pub use_memory: bool,
    pub gpm_threshold: f64,
    pub gpm_exemplars: usize,
    /// While projecting, also hold biases, batch-norm parameters and running
    /// statistics fixed, so protected inputs map to identical outputs.
    pub gpm_freeze_shared: bool,
    pub memory_capacity: usize,
    pub alloc_factor: Option<f64>,
    pub log_batches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1024,
            memory_batch: 128,
            learning_rate: 0.01,
            weight_decay: 1e-3,
            max_epochs: 20,
            patience: 3,
            min_delta: 0.01,
            lr_decay: 0.96,
            momentum: 0.9,
            distill_weight: 1.0,
            teacher_refresh: TeacherRefresh::PerBatch,
            use_gpm: true,
            use_memory: true,
            gpm_threshold: DEFAULT_ENERGY_THRESHOLD,
            gpm_exemplars: DEFAULT_EXEMPLAR_COUNT,
            gpm_freeze_shared: false,
            memory_capacity: 1500,
            alloc_factor: None,
            log_batches: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        BatchPlan::new(self.batch_size, self.memory_batch, 0.5)?;
        let err = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return err(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return err(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.max_epochs == 0 {
            return err("max_epochs must be positive".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return err(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.gpm_threshold > 0.0 && self.gpm_threshold <= 1.0) {
            return err(format!(
                "gpm_threshold {} outside (0, 1]",
                self.gpm_threshold
            ));
        }
        if self.gpm_exemplars == 0 {
            return err("gpm_exemplars must be positive".into());
        }
        if let Some(f) = self.alloc_factor {
            if !(f > 0.0 && f <= 1.0) {
                return err(format!("alloc_factor {f} outside (0, 1]"));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Batch {
        task: usize,
        epoch: usize,
        step: usize,
        b_m: usize,
        b_l: usize,
        b_u: usize,
        classification: f64,
        distillation: f64,
        projected: bool,
    },
    Epoch {
        task: usize,
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
        learning_rate: f64,
    },
    GpmUpdate {
        task: usize,
        exemplars: usize,
        from_memory: bool,
        added: Vec<usize>,
        dims: Vec<usize>,
    },
    Task {
        task: usize,
        phase: String,
        epochs: usize,
        steps: usize,
        projections: usize,
        memory_size: usize,
        rho_a: Option<f64>,
        rho_b: Option<f64>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn projection_events(&self) -> usize {
        self.records
            .iter()
            .filter(|r| {
                matches!(
                    r,
                    LogRecord::Batch {
                        projected: true,
                        ..
                    }
                )
            })
            .count()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub model: MlpModel,
    /// Snapshot used for pseudo-labels and distillation; never stepped.
    pub teacher: Option<MlpModel>,
    /// `None` when projection is disabled.
    pub gpm: Option<GpmMemory>,
    pub memory: BufferMemory,
    pub stats: SeenTaskStats,
    pub optimizer: OptimizerState,
    pub rng: SoulRng,
    /// Labeled part of the last trained task, source of GPM exemplars.
    pub prev_labeled: Option<LabeledSet>,
    pub tasks_trained: usize,
    pub log: TrainLog,
}

impl TrainerState {
    pub fn new(model: MlpModel, cfg: &TrainConfig, rng: SoulRng) -> Result<Self> {
        cfg.validate()?;
        let mut optimizer = OptimizerState::new(&model, cfg.learning_rate, cfg.weight_decay)?;
        optimizer.momentum = cfg.momentum;
        optimizer.epoch_decay = cfg.lr_decay;
        optimizer.early_stopping.patience = cfg.patience;
        optimizer.early_stopping.delta = cfg.min_delta;
        let gpm = if cfg.use_gpm {
            Some(GpmMemory::new(
                &model,
                cfg.gpm_threshold,
                cfg.gpm_exemplars,
            )?)
        } else {
            None
        };
        let memory = match cfg.alloc_factor {
            Some(f) => BufferMemory::with_alloc_factor(cfg.memory_capacity, f)?,
            None => BufferMemory::new(cfg.memory_capacity),
        };
        Ok(TrainerState {
            model,
            teacher: None,
            gpm,
            memory,
            stats: SeenTaskStats::default(),
            optimizer,
            rng,
            prev_labeled: None,
            tasks_trained: 0,
            log: TrainLog::default(),
        })
    }
}

/// Mean eval-mode cross-entropy.
pub fn mean_cross_entropy(model: &MlpModel, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let logits = model.forward_logits(&set.features)?;
    let lp = log_softmax_rows(&logits);
    let s: f64 = set
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -lp[(i, y as usize)])
        .sum();
    Ok(s / set.len() as f64)
}

fn validation_loss(model: &MlpModel, task: &TaskDataset) -> Result<f64> {
    if !task.val.is_empty() {
        mean_cross_entropy(model, &task.val)
    } else {
        mean_cross_entropy(model, &task.labeled)
    }
}

/// Cycles through a shuffled index range, reshuffling after each pass.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut SoulRng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cycler { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut SoulRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let n = (k - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + n]);
            self.pos += n;
        }
        out
    }
}

fn stack_rows(parts: &[&Matrix], width: usize) -> Result<Matrix> {
    let rows: usize = parts.iter().map(|m| m.rows()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for m in parts {
        data.extend_from_slice(m.as_slice());
    }
    Matrix::new(rows, width, data)
}

/// One optimizer step; returns the loss and whether the gradient was projected.
fn step(
    state: &mut TrainerState,
    batch: &TrainBatch,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, bool)> {
    let dropout_seed = state.rng.random::<u64>();
    let weights = LossWeights {
        distill_weight: cfg.distill_weight,
    };
    let out = state.model.loss_and_gradients(
        state.teacher.as_ref(),
        batch,
        weights,
        Mode::Train {
            dropout_seed: Some(dropout_seed),
        },
    )?;
    if !out.gradients.is_finite() {
        return Err(Error::InvalidMatrix("non-finite gradient".into()));
    }
    let mut g = out.gradients;
    let projected = match &state.gpm {
        Some(gpm) if !gpm.is_empty() => {
            g.add_weight_decay(&state.model, state.optimizer.weight_decay)?;
            if cfg.gpm_freeze_shared {
                for l in &mut g.layers {
                    l.bias.fill(0.0);
                    l.gamma
                        .iter_mut()
                        .chain(l.beta.iter_mut())
                        .for_each(|v| v.fill(0.0));
                }
            } else {
                state.model.update_running_stats(&out.batch_stats);
            }
            gpm.project(&mut g)?;
            state.optimizer.step_decayed(&mut state.model, &g)?;
            true
        }
        _ => {
            state.model.update_running_stats(&out.batch_stats);
            state.optimizer.step(&mut state.model, &g)?;
            false
        }
    };
    Ok((out.loss, projected))
}

fn run_epochs<F>(
    state: &mut TrainerState,
    task: &TaskDataset,
    cfg: &TrainConfig,
    mut epoch_body: F,
) -> Result<(usize, usize, usize)>
where
    F: FnMut(&mut TrainerState, usize) -> Result<(f64, usize, usize)>,
{
    state.optimizer.reset();
    let (mut epochs, mut steps, mut projections) = (0, 0, 0);
    for epoch in 1..=cfg.max_epochs {
        let (train_loss, s, p) = epoch_body(state, epoch)?;
        steps += s;
        projections += p;
        epochs = epoch;
        let val_loss = validation_loss(&state.model, task)?;
        state.log.push(LogRecord::Epoch {
            task: task.task_id,
            epoch,
            train_loss,
            val_loss,
            learning_rate: state.optimizer.learning_rate,
        });
        if state.optimizer.epoch_end(val_loss) == EpochDecision::Stop {
            break;
        }
    }
    Ok((epochs, steps, projections))
}

/// Supervised training on the first task's labeled data, then buffer and
/// statistics bookkeeping.
pub fn train_first_task(
    state: &mut TrainerState,
    task: &TaskDataset,
    cfg: &TrainConfig,
    owl: &OwlConfig,
) -> Result<()> {
    if task.labeled.is_empty() {
        return Err(Error::NoLabels(task.task_id));
    }
    state.teacher = None;
    let n = task.labeled.len();
    let b = cfg.batch_size;
    let (epochs, steps, projections) = run_epochs(state, task, cfg, |state, epoch| {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.rng);
        let (mut total, mut count, mut proj) = (0.0, 0, 0);
        for (s, chunk) in order.chunks(b).enumerate() {
            let batch = TrainBatch::labeled(
                task.labeled.features.select_rows(chunk),
                chunk.iter().map(|&i| task.labeled.labels[i]).collect(),
            );
            let (loss, projected) = step(state, &batch, cfg)?;
            total += loss.total();
            count += 1;
            proj += projected as usize;
            if cfg.log_batches {
                state.log.push(LogRecord::Batch {
                    task: task.task_id,
                    epoch,
                    step: s,
                    b_m: 0,
                    b_l: chunk.len(),
                    b_u: 0,
                    classification: loss.classification,
                    distillation: loss.distillation,
                    projected,
                });
            }
        }
        Ok((total / count as f64, count, proj))
    })?;
    finish_task(
        state,
        task,
        cfg,
        owl,
        "first",
        epochs,
        steps,
        projections,
        true,
    )
}

/// Pseudo-label the unlabeled rows with the teacher, train, then bookkeeping.
/// `seen` controls whether the task feeds the seen-task statistics.
pub fn train_task_sscl(
    state: &mut TrainerState,
    task: &TaskDataset,
    cfg: &TrainConfig,
    owl: &OwlConfig,
    seen: bool,
) -> Result<()> {
    if task.train_size() == 0 {
        return Err(Error::EmptyTask(task.task_id));
    }
    update_gpm_before_task(state, task.task_id)?;

    let width = task.width();
    let (n_l, n_u) = (task.labeled.len(), task.unlabeled.len());
    let mem_draw = if cfg.use_memory {
        if state.memory.is_empty() {
            log::warn!("task {}: buffer memory empty, b_m = 0", task.task_id);
        }
        cfg.memory_batch.min(state.memory.len())
    } else {
        0
    };
    let plan = BatchPlan::new(cfg.batch_size, mem_draw, owl.ratio)?;
    // Fall back to a single source when the other one is empty.
    let (b_l, b_u) = match (n_l, n_u) {
        (0, _) => (0, plan.b_l + plan.b_u),
        (_, 0) => (plan.b_l + plan.b_u, 0),
        _ => (plan.b_l.max(1), plan.b_u.max(1)),
    };
    let steps_per_epoch = [(n_l, b_l), (n_u, b_u)]
        .iter()
        .filter(|(n, b)| *n > 0 && *b > 0)
        .map(|(n, b)| n.div_ceil(*b))
        .max()
        .unwrap_or(0);

    if cfg.teacher_refresh == TeacherRefresh::PerTask {
        state.teacher = Some(state.model.clone());
    }
    let (epochs, steps, projections) = run_epochs(state, task, cfg, |state, epoch| {
        let mut lab = Cycler::new(n_l, &mut state.rng);
        let mut unl = Cycler::new(n_u, &mut state.rng);
        let (mut total, mut proj) = (0.0, 0);
        for s in 0..steps_per_epoch {
            if cfg.teacher_refresh == TeacherRefresh::PerBatch {
                state.teacher = Some(state.model.clone());
            }
            let mem_idx = if plan.b_m > 0 {
                state.memory.sample_indices(plan.b_m, &mut state.rng)?
            } else {
                Vec::new()
            };
            let l_idx = lab.take(b_l, &mut state.rng);
            let u_idx = unl.take(b_u, &mut state.rng);

            let mem_rows: Vec<&[f64]> = mem_idx
                .iter()
                .map(|&i| state.memory.entries()[i].features.as_slice())
                .collect();
            let mem_x = if mem_rows.is_empty() {
                Matrix::zeros(0, width)
            } else {
                Matrix::from_rows(&mem_rows)?
            };
            let lab_x = task.labeled.features.select_rows(&l_idx);
            let unl_x = task.unlabeled.features.select_rows(&u_idx);
            let mut targets: Vec<u8> = mem_idx
                .iter()
                .map(|&i| state.memory.entries()[i].label)
                .collect();
            targets.extend(l_idx.iter().map(|&i| task.labeled.labels[i]));
            if !u_idx.is_empty() {
                let teacher = state.teacher.as_ref().unwrap_or(&state.model);
                targets.extend(pseudo_labels(teacher, &unl_x)?);
            }
            let batch = TrainBatch {
                inputs: stack_rows(&[&mem_x, &lab_x, &unl_x], width)?,
                targets,
                unlabeled_start: mem_idx.len() + l_idx.len(),
            };
            let (loss, projected) = step(state, &batch, cfg)?;
            total += loss.total();
            proj += projected as usize;
            if cfg.log_batches {
                state.log.push(LogRecord::Batch {
                    task: task.task_id,
                    epoch,
                    step: s,
                    b_m: mem_idx.len(),
                    b_l: l_idx.len(),
                    b_u: u_idx.len(),
                    classification: loss.classification,
                    distillation: loss.distillation,
                    projected,
                });
            }
        }
        Ok((total / steps_per_epoch.max(1) as f64, steps_per_epoch, proj))
    })?;
    let phase = if seen { "sscl" } else { "open-world" };
    finish_task(
        state,
        task,
        cfg,
        owl,
        phase,
        epochs,
        steps,
        projections,
        seen,
    )
}

/// Grow the projection memory from the previous task's attack exemplars,
/// falling back to attack samples in the buffer.
fn update_gpm_before_task(state: &mut TrainerState, task_id: usize) -> Result<()> {
    let Some(gpm) = state.gpm.as_mut() else {
        return Ok(());
    };
    if state.tasks_trained == 0 {
        return Ok(());
    }
    let from_prev = state.prev_labeled.as_ref().and_then(|l| {
        let idx: Vec<usize> = (0..l.len()).filter(|&i| l.labels[i] == 1).collect();
        (!idx.is_empty()).then(|| l.features.select_rows(&idx))
    });
    let (exemplars, from_memory) = match from_prev {
        Some(x) => (x, false),
        None => match state.memory.attack_features() {
            Some(x) => (x, true),
            None => {
                log::warn!("task {task_id}: no attack exemplars, projection memory unchanged");
                return Ok(());
            }
        },
    };
    let n = exemplars.rows();
    let take = n.min(gpm.exemplar_count);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut state.rng);
    idx.truncate(take);
    idx.sort_unstable();
    let summary = gpm.update(&state.model, &exemplars.select_rows(&idx))?;
    state.log.push(LogRecord::GpmUpdate {
        task: task_id,
        exemplars: summary.exemplars_used,
        from_memory,
        added: summary.added,
        dims: gpm.basis_dims(),
    });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finish_task(
    state: &mut TrainerState,
    task: &TaskDataset,
    cfg: &TrainConfig,
    owl: &OwlConfig,
    phase: &str,
    epochs: usize,
    steps: usize,
    projections: usize,
    seen: bool,
) -> Result<()> {
    if seen {
        state.stats.record_cir(task.cir);
    }
    let agreement_first = seen && !task.labeled.is_empty() && !state.memory.is_empty();
    if agreement_first {
        let (a, b) = compute_agreement_fraction(&state.model, &task.labeled, &state.memory, owl)?;
        state.stats.blend(a, b, owl.blend_weight);
    }
    state.memory.reorganize(
        &task.labeled.features,
        &task.labeled.labels,
        task.task_id,
        &mut state.rng,
    )?;
    if seen && !agreement_first && !task.labeled.is_empty() && !state.memory.is_empty() {
        let (a, b) = compute_agreement_fraction(&state.model, &task.labeled, &state.memory, owl)?;
        state.stats.blend(a, b, owl.blend_weight);
    }
    state.prev_labeled = Some(task.labeled.clone());
    state.tasks_trained += 1;
    let _ = cfg;
    state.log.push(LogRecord::Task {
        task: task.task_id,
        phase: phase.to_string(),
        epochs,
        steps,
        projections,
        memory_size: state.memory.len(),
        rho_a: state.stats.rho_a,
        rho_b: state.stats.rho_b,
    });
    Ok(())
}

/// Current per-class agreement on a seen task's labeled data.
pub fn compute_agreement_fraction(
    model: &MlpModel,
    labeled: &LabeledSet,
    memory: &BufferMemory,
    owl: &OwlConfig,
) -> Result<(f64, f64)> {
    current_agreement(model, labeled, memory, owl)
}
