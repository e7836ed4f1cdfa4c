//! End-to-end runs: build the task stream, train the first task
//! supervised, the remaining seen tasks semi-supervised, and each unseen task
//! after open-world labeling; then score every test split.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{
    generate_synthetic_table, hash_files, preprocess_csv_with, split_tasks, write_json, FlowTable,
    PreprocessOptions, Schema, SplitFractions, SyntheticSpec, TaskStream,
};
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate_split, EvalReport, TaskMetrics};
use crate::nn::{MlpModel, ModelSpec};
use crate::owl::{label_unseen_task, LabelingOutcome, OwlConfig};
use crate::sscl::{train_first_task, train_task_sscl, TrainConfig, TrainLog, TrainerState};
use crate::{par, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Csv {
        schema: Schema,
        files: Vec<PathBuf>,
        #[serde(default)]
        label_column: Option<String>,
        #[serde(default)]
        group_column: Option<String>,
        #[serde(default)]
        strict_width: bool,
        /// Keep at most this many rows, chosen uniformly with the split seed.
        #[serde(default)]
        max_rows: Option<usize>,
    },
    Cache {
        path: PathBuf,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<FlowTable> {
        match self {
            DatasetSource::Synthetic(spec) => generate_synthetic_table(spec),
            DatasetSource::Csv {
                schema,
                files,
                label_column,
                group_column,
                strict_width,
                ..
            } => {
                let mut opts = PreprocessOptions {
                    group_column: group_column.clone(),
                    strict_width: *strict_width,
                    ..PreprocessOptions::default()
                };
                if let Some(l) = label_column {
                    opts.label_column = l.clone();
                }
                preprocess_csv_with(files, *schema, &opts)
            }
            DatasetSource::Cache { path } => FlowTable::read_cache(path),
        }
    }

    /// Content hash of the inputs the run reads.
    pub fn input_hash(&self) -> Result<String> {
        match self {
            DatasetSource::Synthetic(spec) => {
                Ok(hex::encode(Sha256::digest(serde_json::to_vec(spec)?)))
            }
            DatasetSource::Csv { files, .. } => hash_files(files),
            DatasetSource::Cache { path } => hash_files(std::slice::from_ref(path)),
        }
    }

    fn check_paths(&self) -> Result<()> {
        let paths: Vec<&PathBuf> = match self {
            DatasetSource::Synthetic(_) => Vec::new(),
            DatasetSource::Csv { files, .. } => files.iter().collect(),
            DatasetSource::Cache { path } => vec![path],
        };
        if let DatasetSource::Csv { files, .. } = self {
            if files.is_empty() {
                return Err(Error::Config("csv dataset lists no files".into()));
            }
        }
        match paths.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(Error::Config(format!(
                "input {} does not exist",
                p.display()
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub seen_count: usize,
    /// Labeled fraction `r`; also drives the batch split and the labeling caps.
    pub ratio: f64,
    #[serde(default)]
    pub splits: SplitFractions,
    /// `FC:w1,...,2`.
    pub architecture: String,
    #[serde(default = "yes")]
    pub batchnorm: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub owl: OwlConfig,
    pub seeds: Vec<u64>,
    /// Score every task after each training step.
    #[serde(default)]
    pub history: bool,
}

fn yes() -> bool {
    true
}

fn default_dropout() -> f64 {
    0.2
}

pub const PRESETS: [&str; 5] = [
    "ctu13",
    "unswnb15",
    "cicids2017",
    "cicids2018",
    "synthetic-small",
];

impl RunConfig {
    /// Named presets. Real-dataset presets leave `files` empty.
    pub fn preset(name: &str) -> Result<Self> {
        // (schema, memory, architecture, lr, wd, c_d, vote)
        let row = match name {
            "ctu13" => (
                Schema::Ctu13,
                1500,
                "FC:100,150,50,10,2",
                1e-3,
                1e-2,
                0.1,
                0.98,
            ),
            "unswnb15" => (
                Schema::Unswnb15,
                6666,
                "FC:100,250,500,150,50,2",
                1e-2,
                1e-2,
                0.1,
                0.98,
            ),
            "cicids2017" => (
                Schema::Cicids2017,
                13334,
                "FC:100,250,500,150,50,2",
                1e-2,
                1e-3,
                0.3,
                0.99,
            ),
            "cicids2018" => (
                Schema::Cicids2018,
                13334,
                "FC:100,250,100,200,50,10,2",
                1e-2,
                1e-3,
                0.1,
                0.98,
            ),
            "synthetic-small" => return Ok(Self::synthetic_small()),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; known: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        let (schema, memory, arch, lr, wd, c_d, vote) = row;
        Ok(RunConfig {
            name: name.to_string(),
            dataset: DatasetSource::Csv {
                schema,
                files: Vec::new(),
                label_column: None,
                group_column: None,
                strict_width: false,
                max_rows: None,
            },
            seen_count: 2,
            ratio: 0.2,
            splits: SplitFractions::default(),
            architecture: arch.to_string(),
            batchnorm: true,
            dropout: 0.2,
            train: TrainConfig {
                learning_rate: lr,
                weight_decay: wd,
                memory_capacity: memory,
                ..TrainConfig::default()
            },
            owl: OwlConfig {
                c_d,
                vote_threshold: vote,
                ..OwlConfig::default()
            },
            seeds: vec![0, 1, 2],
            history: false,
        })
    }

    fn synthetic_small() -> Self {
        RunConfig {
            name: "synthetic-small".into(),
            dataset: DatasetSource::Synthetic(SyntheticSpec {
                tasks: 4,
                samples_per_task: 1500,
                dims: 4,
                cir_per_task: vec![0.2],
                drift_angle_deg: 10.0,
                ..SyntheticSpec::default()
            }),
            seen_count: 2,
            ratio: 0.2,
            splits: SplitFractions::default(),
            architecture: "FC:32,16,2".into(),
            batchnorm: true,
            dropout: 0.0,
            train: TrainConfig {
                batch_size: 32,
                memory_batch: 4,
                learning_rate: 1e-2,
                weight_decay: 1e-3,
                max_epochs: 20,
                memory_capacity: 300,
                gpm_exemplars: 500,
                ..TrainConfig::default()
            },
            owl: OwlConfig::default(),
            seeds: vec![0, 1, 2],
            history: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!(
                "ratio {} outside (0, 1)",
                self.ratio
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        self.splits.validate()?;
        self.train.validate()?;
        self.owl_config().validate()?;
        ModelSpec::from_fc_string(1, &self.architecture)?;
        self.dataset.check_paths()
    }

    pub fn owl_config(&self) -> OwlConfig {
        OwlConfig {
            ratio: self.ratio,
            ..self.owl
        }
    }

    /// Hash of everything that shapes results except the seed list.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.seeds.clear();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
    }

    pub fn model_spec(&self, input_dim: usize) -> Result<ModelSpec> {
        let mut spec = ModelSpec::from_fc_string(input_dim, &self.architecture)?;
        spec.batchnorm = self.batchnorm;
        spec.dropout = self.dropout;
        Ok(spec)
    }

    /// Load the table and split it with the given seed.
    pub fn build_stream(&self, table: &FlowTable, seed: u64) -> Result<TaskStream> {
        let split_seed = match &self.dataset {
            DatasetSource::Synthetic(spec) => spec.seed.wrapping_add(1).wrapping_add(seed),
            _ => seed,
        };
        let table = match &self.dataset {
            DatasetSource::Csv {
                max_rows: Some(m), ..
            } if *m < table.len() => subsample(table, *m, split_seed),
            _ => table.clone(),
        };
        split_tasks(&table, self.seen_count, self.ratio, split_seed, self.splits)
    }
}

fn subsample(table: &FlowTable, n: usize, seed: u64) -> FlowTable {
    use rand::seq::index::sample;
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let mut idx = sample(&mut rng, table.len(), n).into_vec();
    idx.sort_unstable();
    let mut out = table.clone();
    out.records = idx.iter().map(|&i| table.records[i].clone()).collect();
    out.groups = idx.iter().map(|&i| table.groups[i]).collect();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTiming {
    pub task_id: usize,
    pub phase: String,
    pub seconds: f64,
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub report: EvalReport,
    pub log: TrainLog,
    pub labeling: Vec<LabelingOutcome>,
    pub checkpoint: Checkpoint,
    pub timings: Vec<TaskTiming>,
}

fn score_all(model: &MlpModel, stream: &TaskStream) -> Result<Vec<TaskMetrics>> {
    stream
        .tasks
        .iter()
        .map(|t| {
            evaluate_split(
                model,
                &t.test.features,
                &t.test.labels,
                t.task_id,
                stream.is_seen(t.task_id),
            )
        })
        .collect()
}

/// Run the full task sequence for one seed.
pub fn run_seed(
    cfg: &RunConfig,
    stream: &TaskStream,
    seed: u64,
    config_hash: &str,
) -> Result<SeedRun> {
    let owl = cfg.owl_config();
    let mut rng = rng_from_seed(seed);
    let model = MlpModel::new(&cfg.model_spec(stream.width())?, &mut rng)?;
    let mut state = TrainerState::new(model, &cfg.train, rng)?;
    let mut labeling = Vec::new();
    let mut timings = Vec::new();
    let mut history = Vec::new();
    for task in &stream.tasks {
        let start = Instant::now();
        let phase = if task.task_id == 1 {
            train_first_task(&mut state, task, &cfg.train, &owl)?;
            "first"
        } else if stream.is_seen(task.task_id) {
            train_task_sscl(&mut state, task, &cfg.train, &owl, true)?;
            "sscl"
        } else {
            let (outcome, labeled) = label_unseen_task(
                &state.model,
                task,
                &state.memory,
                &state.stats,
                &owl,
                &mut state.rng,
            )?;
            labeling.push(outcome);
            train_task_sscl(&mut state, &labeled, &cfg.train, &owl, false)?;
            "open-world"
        };
        timings.push(TaskTiming {
            task_id: task.task_id,
            phase: phase.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        if cfg.history {
            history.push(score_all(&state.model, stream)?);
        }
    }
    let summaries = labeling.iter().map(|o| o.summary.clone()).collect();
    let mut report = aggregate(
        score_all(&state.model, stream)?,
        stream.seen_count,
        summaries,
        seed,
        config_hash.to_string(),
    );
    report.history = history;
    Ok(SeedRun {
        seed,
        report,
        checkpoint: Checkpoint::from_state(&state),
        log: std::mem::take(&mut state.log),
        labeling,
        timings,
    })
}

/// Resolved inputs and produced artifacts of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub input_hash: String,
    pub crate_version: String,
    pub parallel: bool,
    pub seeds: Vec<SeedManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub seed: u64,
    /// `None` when the seed failed.
    pub error: Option<String>,
    pub timings: Vec<TaskTiming>,
    pub report: Option<PathBuf>,
    pub task_csv: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub labeling: Vec<PathBuf>,
}

pub struct RunOutput {
    pub manifest: RunManifest,
    pub runs: Vec<std::result::Result<SeedRun, Error>>,
}

impl RunOutput {
    pub fn reports(&self) -> Vec<&EvalReport> {
        self.runs
            .iter()
            .filter_map(|r| r.as_ref().ok())
            .map(|r| &r.report)
            .collect()
    }
}

/// Run every seed (in parallel when enabled). A failing seed is recorded and
/// the others proceed. Artifacts go under `out_dir/seed-<s>/` when given.
pub fn run(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let config_hash = cfg.config_hash()?;
    let input_hash = cfg.dataset.input_hash()?;
    let table = cfg.dataset.load()?;
    let runs: Vec<Result<SeedRun>> = par::map_coarse(cfg.seeds.len(), |i| {
        let seed = cfg.seeds[i];
        let stream = cfg.build_stream(&table, seed)?;
        run_seed(cfg, &stream, seed, &config_hash)
    });
    let mut seeds = Vec::with_capacity(runs.len());
    for (seed, r) in cfg.seeds.iter().zip(&runs) {
        let m = match r {
            Ok(run) => match out_dir {
                Some(dir) => write_seed(run, dir)?,
                None => SeedManifest {
                    seed: *seed,
                    error: None,
                    timings: run.timings.clone(),
                    report: None,
                    task_csv: None,
                    train_log: None,
                    checkpoint: None,
                    labeling: Vec::new(),
                },
            },
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                SeedManifest {
                    seed: *seed,
                    error: Some(e.to_string()),
                    timings: Vec::new(),
                    report: None,
                    task_csv: None,
                    train_log: None,
                    checkpoint: None,
                    labeling: Vec::new(),
                }
            }
        };
        seeds.push(m);
    }
    let manifest = RunManifest {
        config: cfg.clone(),
        config_hash,
        input_hash,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        parallel: par::is_parallel(),
        seeds,
    };
    if let Some(dir) = out_dir {
        write_json(&manifest, &dir.join("manifest.json"))?;
    }
    Ok(RunOutput { manifest, runs })
}

fn write_seed(run: &SeedRun, dir: &Path) -> Result<SeedManifest> {
    let d = dir.join(format!("seed-{}", run.seed));
    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    let report = d.join("report.json");
    run.report.write_json(&report)?;
    let task_csv = d.join("tasks.csv");
    run.report.write_task_csv(&task_csv)?;
    let train_log = d.join("train_log.jsonl");
    run.log.write_jsonl(&train_log)?;
    let checkpoint = d.join("checkpoint.bin");
    run.checkpoint.write(&checkpoint)?;
    let mut labeling = Vec::new();
    for o in &run.labeling {
        let p = d.join(format!("labels_task{}.csv", o.task_id));
        o.write_csv(&p)?;
        labeling.push(p);
    }
    Ok(SeedManifest {
        seed: run.seed,
        error: None,
        timings: run.timings.clone(),
        report: Some(report),
        task_csv: Some(task_csv),
        train_log: Some(train_log),
        checkpoint: Some(checkpoint),
        labeling,
    })
}
