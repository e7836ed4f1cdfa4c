//! Run configuration: preset, then TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use soul::experiment::{DatasetSource, RunConfig};
use soul::sscl::TeacherRefresh;

/// Flags that override individual `RunConfig` fields.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Experiment name (used for the output directory).
    #[arg(long)]
    pub name: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Number of seen tasks c.
    #[arg(long)]
    pub seen_count: Option<usize>,
    /// Labeled fraction r.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Architecture string, e.g. FC:100,150,50,10,2.
    #[arg(long)]
    pub architecture: Option<String>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub no_batchnorm: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Buffer draws per batch (b_m).
    #[arg(long)]
    pub memory_batch: Option<usize>,
    #[arg(long)]
    pub memory_capacity: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub distill_weight: Option<f64>,
    /// Refresh the teacher only at task start.
    #[arg(long)]
    pub teacher_per_task: bool,
    /// Energy threshold for the projection memory.
    #[arg(long)]
    pub gpm_threshold: Option<f64>,
    #[arg(long)]
    pub gpm_exemplars: Option<usize>,
    /// Ablation: disable gradient projection.
    #[arg(long)]
    pub no_gpm: bool,
    /// Ablation: disable buffer replay.
    #[arg(long)]
    pub no_memory: bool,
    #[arg(long)]
    pub gamma_a: Option<f64>,
    #[arg(long)]
    pub gamma_b: Option<f64>,
    #[arg(long)]
    pub c_d: Option<f64>,
    #[arg(long)]
    pub vote_threshold: Option<f64>,
    #[arg(long)]
    pub blend_weight: Option<f64>,
    /// Raw CSV inputs (keeps the preset's schema).
    #[arg(long, num_args = 1..)]
    pub files: Option<Vec<PathBuf>>,
    /// Preprocessed dataset cache.
    #[arg(long, conflicts_with = "files")]
    pub cache: Option<PathBuf>,
    /// Uniform subsample of raw CSV rows.
    #[arg(long)]
    pub max_rows: Option<usize>,
    /// Score every task after each training step.
    #[arg(long)]
    pub history: bool,
}

/// Recursively overlay `top` onto `base`.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Build the config from an optional preset name and an optional TOML file.
/// A `preset = "..."` key in the file is used when no preset flag is given.
pub fn load(preset: Option<&str>, file: Option<&Path>) -> Result<RunConfig> {
    let mut user = match file {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            text.parse::<toml::Table>()
                .map_err(|e| soul::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let file_preset = match user.remove("preset") {
        Some(toml::Value::String(s)) => Some(s),
        Some(other) => bail!(soul::Error::Config(format!(
            "preset must be a string, got {other}"
        ))),
        None => None,
    };
    let preset = preset.map(str::to_string).or(file_preset);
    let mut value = match &preset {
        Some(name) => {
            toml::Value::try_from(RunConfig::preset(name)?).context("serializing preset")?
        }
        None => toml::Value::Table(toml::Table::new()),
    };
    if preset.is_some() {
        // A file naming a different dataset kind replaces the preset's dataset.
        if let (Some(toml::Value::Table(d)), toml::Value::Table(v)) =
            (user.get("dataset"), &mut value)
        {
            let kind = v.get("dataset").and_then(|x| x.get("kind")).cloned();
            if d.get("kind").is_some() && d.get("kind") != kind.as_ref() {
                v.remove("dataset");
            }
        }
    }
    merge(&mut value, toml::Value::Table(user));
    value
        .try_into::<RunConfig>()
        .map_err(|e| soul::Error::Config(e.to_string()).into())
}

pub fn apply(cfg: &mut RunConfig, o: &Overrides) -> Result<()> {
    macro_rules! set {
        ($field:expr, $v:expr) => {
            if let Some(v) = $v.clone() {
                $field = v;
            }
        };
    }
    set!(cfg.name, o.name);
    set!(cfg.seeds, o.seeds);
    set!(cfg.seen_count, o.seen_count);
    set!(cfg.ratio, o.ratio);
    set!(cfg.architecture, o.architecture);
    set!(cfg.dropout, o.dropout);
    set!(cfg.train.batch_size, o.batch_size);
    set!(cfg.train.memory_batch, o.memory_batch);
    set!(cfg.train.memory_capacity, o.memory_capacity);
    set!(cfg.train.learning_rate, o.learning_rate);
    set!(cfg.train.weight_decay, o.weight_decay);
    set!(cfg.train.max_epochs, o.max_epochs);
    set!(cfg.train.distill_weight, o.distill_weight);
    set!(cfg.train.gpm_threshold, o.gpm_threshold);
    set!(cfg.train.gpm_exemplars, o.gpm_exemplars);
    set!(cfg.owl.gamma_a, o.gamma_a);
    set!(cfg.owl.gamma_b, o.gamma_b);
    set!(cfg.owl.c_d, o.c_d);
    set!(cfg.owl.vote_threshold, o.vote_threshold);
    set!(cfg.owl.blend_weight, o.blend_weight);
    if o.no_batchnorm {
        cfg.batchnorm = false;
    }
    if o.teacher_per_task {
        cfg.train.teacher_refresh = TeacherRefresh::PerTask;
    }
    if o.no_gpm {
        cfg.train.use_gpm = false;
    }
    if o.no_memory {
        cfg.train.use_memory = false;
    }
    if o.history {
        cfg.history = true;
    }
    if let Some(path) = &o.cache {
        cfg.dataset = DatasetSource::Cache { path: path.clone() };
    }
    if let Some(new_files) = &o.files {
        match &mut cfg.dataset {
            DatasetSource::Csv { files, .. } => *files = new_files.clone(),
            _ => bail!(soul::Error::Config(
                "--files needs a csv dataset (use a real-dataset preset or a config file)".into()
            )),
        }
    }
    if let Some(m) = o.max_rows {
        match &mut cfg.dataset {
            DatasetSource::Csv { max_rows, .. } => *max_rows = Some(m),
            _ => bail!(soul::Error::Config(
                "--max-rows applies to csv datasets only".into()
            )),
        }
    }
    Ok(())
}
