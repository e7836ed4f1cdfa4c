mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use soul::data::{
    generate_synthetic_table, preprocess_csv_with, write_json, DatasetManifest, PreprocessOptions,
    Schema, SyntheticSpec,
};
use soul::eval::{format_pct, summarize, EvalReport, SummaryRow, SUMMARY_FIELDS};
use soul::experiment::{run, RunConfig};

#[derive(Parser)]
#[command(
    name = "soul",
    version,
    about = "Semi-supervised open-world continual learning for intrusion detection"
)]
struct Cli {
    /// Root for run outputs when --out is not given.
    #[arg(long, global = true, env = "SOUL_OUTPUT_DIR", default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean raw flow CSVs into a dataset cache and manifest.
    Preprocess(PreprocessArgs),
    /// Train and evaluate one configuration over its seeds.
    Run(Box<RunArgs>),
    /// Summarize reports as mean ± std per configuration.
    Table(TableArgs),
    /// Write a synthetic drifting stream as CSV.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// cicids2017, cicids2018, ctu13, unswnb15 or generic.
    #[arg(long)]
    schema: Schema,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[arg(long)]
    group_column: Option<String>,
    /// Fail when the cleaned width differs from the schema's.
    #[arg(long)]
    strict_width: bool,
    /// Output directory for dataset.bin and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; may name a base preset with `preset = "..."`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// ctu13, unswnb15, cicids2017, cicids2018 or synthetic-small.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (default: <output-root>/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    print_config: bool,
    #[command(flatten)]
    overrides: config::Overrides,
}

#[derive(Args)]
struct TableArgs {
    /// report.json files or directories searched recursively for them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with synthetic stream fields; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    samples_per_task: Option<usize>,
    #[arg(long)]
    dims: Option<usize>,
    /// One value, or one per task.
    #[arg(long, value_delimiter = ',')]
    cir: Option<Vec<f64>>,
    #[arg(long)]
    drift_angle: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    base_angle: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    novel_tasks: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV (columns f0.., label, task).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| {
            c.downcast_ref::<soul::Error>()
                .map(soul::Error::kind)
                .or_else(|| c.downcast_ref::<std::io::Error>().map(|_| "IoError"))
        })
        .unwrap_or("Error")
}

/// Write to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Run(a) => cmd_run(*a, &cli.output_root),
        Command::Table(a) => cmd_table(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": ErrorBody { kind: error_kind(&e), message: format!("{e:#}") }
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let opts = PreprocessOptions {
        label_column: a.label_column,
        group_column: a.group_column,
        strict_width: a.strict_width,
    };
    let table = preprocess_csv_with(&a.files, a.schema, &opts)?;
    create_dir(&a.out)?;
    let sha = table.write_cache(&a.out.join("dataset.bin"))?;
    let manifest = DatasetManifest::new(&table, &a.files, sha);
    write_json(&manifest, &a.out.join("manifest.json"))?;
    emit(&(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(())
}

fn resolve_config(a: &RunArgs) -> Result<RunConfig> {
    if a.preset.is_none() && a.config.is_none() {
        bail!(soul::Error::Config("give --preset and/or --config".into()));
    }
    let mut cfg = config::load(a.preset.as_deref(), a.config.as_deref())?;
    config::apply(&mut cfg, &a.overrides)?;
    Ok(cfg)
}

fn cmd_run(a: RunArgs, output_root: &Path) -> Result<()> {
    let cfg = resolve_config(&a)?;
    if a.print_config {
        emit(&toml::to_string(&cfg)?)?;
        return Ok(());
    }
    cfg.validate()?;
    let out = a.out.clone().unwrap_or_else(|| output_root.join(&cfg.name));
    create_dir(&out)?;
    std::fs::write(out.join("config.toml"), toml::to_string(&cfg)?)
        .with_context(|| format!("writing config to {}", out.display()))?;
    let output = run(&cfg, Some(&out))?;
    let reports: Vec<(String, EvalReport)> = output
        .reports()
        .into_iter()
        .map(|r| (cfg.name.clone(), r.clone()))
        .collect();
    let failed: Vec<String> = output
        .manifest
        .seeds
        .iter()
        .filter_map(|s| s.error.as_ref().map(|e| format!("seed {}: {e}", s.seed)))
        .collect();
    if !reports.is_empty() {
        let rows = summarize(&reports)?;
        write_json(&rows, &out.join("summary.json"))?;
        write_table_csv(&rows, &out.join("summary.csv"))?;
        emit(&render_table(&rows))?;
    }
    if !failed.is_empty() {
        bail!(soul::Error::Task(format!(
            "{} of {} seeds failed: {}",
            failed.len(),
            cfg.seeds.len(),
            failed.join("; ")
        )));
    }
    Ok(())
}

fn find_reports(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Run name for `.../<run>/seed-<s>/report.json`, else the file stem.
fn report_label(path: &Path) -> String {
    let parent = path.parent();
    let is_seed_dir = parent
        .and_then(|p| p.file_name())
        .is_some_and(|n| n.to_string_lossy().starts_with("seed-"));
    let named = if is_seed_dir {
        parent.and_then(Path::parent)
    } else {
        None
    };
    named
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cmd_table(a: TableArgs) -> Result<()> {
    let mut paths = Vec::new();
    for p in &a.inputs {
        find_reports(p, &mut paths)?;
    }
    if paths.is_empty() {
        bail!(soul::Error::EmptyInput("no report.json found".into()));
    }
    let mut reports = Vec::with_capacity(paths.len());
    for p in &paths {
        let r = EvalReport::read_json(p).map_err(|e| match e {
            soul::Error::Json(j) => soul::Error::Schema(format!("{}: {j}", p.display())),
            other => other,
        })?;
        reports.push((report_label(p), r));
    }
    let rows = summarize(&reports)?;
    if let Some(csv) = &a.csv {
        write_table_csv(&rows, csv)?;
    }
    emit(&render_table(&rows))?;
    Ok(())
}

fn cell(field: &str, stat: Option<soul::eval::Stat>) -> String {
    match stat {
        None => "-".into(),
        Some(s) if field == "savings_pct" => {
            format!("{}% ± {}", format_pct(s.mean), format_pct(s.std))
        }
        Some(s) => format!("{:.3} ± {:.3}", s.mean, s.std),
    }
}

fn render_table(rows: &[SummaryRow]) -> String {
    let mut header = vec!["config".to_string(), "seeds".to_string()];
    header.extend(SUMMARY_FIELDS.iter().map(|f| f.to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut line = vec![r.label.clone(), r.seeds.len().to_string()];
            line.extend(
                SUMMARY_FIELDS
                    .iter()
                    .zip(&r.stats)
                    .map(|(f, s)| cell(f, *s)),
            );
            line
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            std::iter::once(&header)
                .chain(&body)
                .map(|l| l[i].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let fmt = |l: &[String]| {
        let cells: Vec<String> = l
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        cells.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = String::from("# mean ± population std (ddof = 0) across seeds\n");
    s += &fmt(&header);
    for l in &body {
        s += &fmt(l);
    }
    s
}

fn write_table_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    let mut header = vec!["config".to_string(), "config_hash".into(), "seeds".into()];
    for field in SUMMARY_FIELDS {
        header.push(format!("{field}_mean"));
        header.push(format!("{field}_std"));
    }
    writeln!(f, "{}", header.join(","))?;
    for r in rows {
        let mut line = vec![
            r.label.clone(),
            r.config_hash.clone(),
            r.seeds.len().to_string(),
        ];
        for s in &r.stats {
            match s {
                Some(s) => {
                    line.push(s.mean.to_string());
                    line.push(s.std.to_string());
                }
                None => line.extend([String::new(), String::new()]),
            }
        }
        writeln!(f, "{}", line.join(","))?;
    }
    f.flush()?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SyntheticSpec>(&text)
                .map_err(|e| soul::Error::Spec(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($field:ident, $v:expr) => {
            if let Some(v) = $v {
                spec.$field = v;
            }
        };
    }
    set!(tasks, a.tasks);
    set!(samples_per_task, a.samples_per_task);
    set!(dims, a.dims);
    set!(cir_per_task, a.cir);
    set!(drift_angle_deg, a.drift_angle);
    set!(base_angle_deg, a.base_angle);
    set!(separation, a.separation);
    set!(noise, a.noise);
    set!(novel_tasks, a.novel_tasks);
    set!(seed, a.seed);
    let table = generate_synthetic_table(&spec)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    table.write_csv(&a.out)?;
    let summary = serde_json::json!({
        "out": a.out,
        "spec": spec,
        "groups": table.group_summaries(),
    });
    emit(&(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(())
}
