//! Experiment harness for the linear self-attention laboratory.
//!
//! Every command is reproducible from `(command line, seed)`. Result files
//! carry two top-level sections: `canonical` (the resolved configuration,
//! artifact version, and all numbers - byte-identical across reruns and
//! worker counts) and `sidecar` (wall time and timestamp, excluded from
//! determinism comparisons). Tables printed to stdout render numbers through
//! the same JSON formatter, so the two views agree to full precision.
//!
//! Exit codes: 0 success / gates passed, 1 gate failure or runtime error,
//! 2 usage error.

mod config;

use anyhow::Context;
use clap::{Parser, Subcommand};
use config::{FileConfig, ResolvedTask, ResolvedTrain, TaskArgs, TrainArgs};
use lsa_lab::estimators::{
    estimate_eta_linear_with, estimate_eta_nonlinear_with, estimate_eta_skewed_with, EtaEstimate,
    McOptions,
};
use lsa_lab::numerics::RngStream;
use lsa_lab::tasks::{sample_batch, TaskKind, TaskSpec};
use lsa_lab::training::train;
use lsa_lab::verify::{run_suite, SuiteConfig, SuiteId};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
const OUTPUT_DIR_ENV: &str = "LSA_LAB_OUTPUT_DIR";
/// Stream index for `gen` batches (distinct from training/suite streams).
const GEN_SPLIT: u64 = 0xA0;
/// Stream index for standalone `eta` runs.
const ETA_SPLIT: u64 = 0xA1;

#[derive(Parser)]
#[command(
    name = "lsa-lab",
    version,
    about = "Linear self-attention in-context regression laboratory",
    after_help = "Config precedence: CLI flag > config file > built-in default.\n\
                  Training CSV columns: step,loss,grad_norm."
)]
struct Cli {
    /// JSON config file (sections: seed, output_dir, task, train, mc).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for result files (env LSA_LAB_OUTPUT_DIR, default "results").
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo loops; never affects results.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a prompt batch and write it as versioned JSON.
    Gen {
        #[command(flatten)]
        task: TaskArgs,
        /// Number of prompts.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: Option<u64>,
        /// Output file (default <output_dir>/prompts-<seed>.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on streamed batches; writes report JSON and loss CSV
    /// (columns: step,loss,grad_norm).
    Train {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Monte Carlo estimate of the optimal one-step learning rate.
    Eta {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        samples: Option<u64>,
        /// Also report a jackknife stderr cross-check.
        #[arg(long)]
        jackknife: bool,
    },
    /// Run the lemma verification suites (both unless --suite is given).
    Lemmas {
        /// lemmas-linear or lemmas-nonlinear.
        #[arg(long)]
        suite: Option<String>,
        #[command(flatten)]
        budget: BudgetArgs,
    },
    /// Run one end-to-end verification suite.
    Verify {
        /// One of: lemmas-linear, lemmas-nonlinear, train-isotropic,
        /// train-skewed, train-nonlinear, constructions.
        #[arg(long)]
        suite: String,
        #[command(flatten)]
        budget: BudgetArgs,
    },
    /// Aggregate suite result files in a directory into a Markdown summary.
    Report {
        /// Directory to scan (default: the output directory).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

/// Budget overrides for suite runs.
#[derive(Debug, Clone, Default, clap::Args)]
struct BudgetArgs {
    /// Use reduced smoke budgets (fast; statistical gates not meaningful).
    #[arg(long)]
    smoke: bool,
    #[arg(long)]
    eta_samples: Option<u64>,
    #[arg(long)]
    isotropy_samples: Option<u64>,
    #[arg(long)]
    constancy_samples: Option<u64>,
    #[arg(long)]
    stationarity_samples: Option<u64>,
    #[arg(long)]
    train_steps: Option<u64>,
    #[arg(long)]
    train_batch_size: Option<u64>,
    #[arg(long)]
    train_step_size: Option<f64>,
    #[arg(long)]
    train_step_size_skewed: Option<f64>,
    #[arg(long)]
    eval_prompts: Option<u64>,
    #[arg(long)]
    probes: Option<u64>,
}

impl BudgetArgs {
    fn to_suite_config(&self, seed: u64) -> SuiteConfig {
        let mut cfg = if self.smoke { SuiteConfig::smoke(seed) } else { SuiteConfig::new(seed) };
        if let Some(v) = self.eta_samples {
            cfg.eta_samples = v as usize;
        }
        if let Some(v) = self.isotropy_samples {
            cfg.isotropy_samples = v as usize;
        }
        if let Some(v) = self.constancy_samples {
            cfg.constancy_samples = v as usize;
        }
        if let Some(v) = self.stationarity_samples {
            cfg.stationarity_samples = v as usize;
        }
        if let Some(v) = self.train_steps {
            cfg.train_steps = v as usize;
        }
        if let Some(v) = self.train_batch_size {
            cfg.train_batch_size = v as usize;
        }
        if let Some(v) = self.train_step_size {
            cfg.train_step_size = v;
        }
        if let Some(v) = self.train_step_size_skewed {
            cfg.train_step_size_skewed = v;
        }
        if let Some(v) = self.eval_prompts {
            cfg.eval_prompts = v as usize;
        }
        if let Some(v) = self.probes {
            cfg.probes = v as usize;
        }
        cfg
    }
}

/// Errors that are the caller's fault exit with code 2.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| usage(format!("--workers: {e}")))?;
    }
    let file = match &cli.config {
        Some(path) => FileConfig::load(path).map_err(|e| usage(e.to_string()))?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let output_dir = cli
        .output_dir
        .clone()
        .or_else(|| file.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));

    match &cli.command {
        Command::Gen { task, count, out } => {
            let resolved =
                ResolvedTask::resolve(task, &file.task).map_err(|e| usage(e.to_string()))?;
            let count = count.unwrap_or(1024) as usize;
            let spec = resolved.to_spec(seed)?;
            cmd_gen(&spec, &resolved, count, seed, out.as_deref(), &output_dir)
        }
        Command::Train { task, train } => {
            let rtask =
                ResolvedTask::resolve(task, &file.task).map_err(|e| usage(e.to_string()))?;
            let rtrain = ResolvedTrain::resolve(train, &file.train, rtask.d)
                .map_err(|e| usage(e.to_string()))?;
            cmd_train(&rtask, &rtrain, seed, &output_dir)
        }
        Command::Eta { task, samples, jackknife } => {
            let rtask =
                ResolvedTask::resolve(task, &file.task).map_err(|e| usage(e.to_string()))?;
            let samples =
                samples.or(file.mc.samples).unwrap_or(200_000) as usize;
            cmd_eta(&rtask, samples, *jackknife, seed, &output_dir)
        }
        Command::Lemmas { suite, budget } => {
            let ids = match suite {
                Some(name) => {
                    let id: SuiteId =
                        name.parse().map_err(|e| usage(format!("{e}")))?;
                    if !matches!(id, SuiteId::LemmasLinear | SuiteId::LemmasNonlinear) {
                        return Err(usage(format!(
                            "`lemmas` runs lemma suites only, got {name:?}; use `verify` for {name}"
                        )));
                    }
                    vec![id]
                }
                None => vec![SuiteId::LemmasLinear, SuiteId::LemmasNonlinear],
            };
            let cfg = budget.to_suite_config(seed);
            let mut all_pass = true;
            for id in ids {
                all_pass &= run_one_suite(id, &cfg, &output_dir)?;
            }
            Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Verify { suite, budget } => {
            let id: SuiteId = suite.parse().map_err(|e| usage(format!("{e}")))?;
            let cfg = budget.to_suite_config(seed);
            let pass = run_one_suite(id, &cfg, &output_dir)?;
            Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Report { dir } => cmd_report(dir.as_deref().unwrap_or(&output_dir)),
    }
}

// --- commands ---------------------------------------------------------------

fn cmd_gen(
    spec: &TaskSpec,
    resolved: &ResolvedTask,
    count: usize,
    seed: u64,
    out: Option<&Path>,
    output_dir: &Path,
) -> Result<ExitCode, CliError> {
    let stream = RngStream::new(seed).split(GEN_SPLIT);
    let batch = sample_batch(spec, count, &stream).map_err(anyhow::Error::from)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| output_dir.join(format!("prompts-{seed}.json")));
    write_atomic(&path, batch.to_json().as_bytes())?;
    println!(
        "wrote {count} prompts ({:?}, d={}, n={}) to {}",
        resolved.task,
        spec.d,
        spec.n,
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    rtask: &ResolvedTask,
    rtrain: &ResolvedTrain,
    seed: u64,
    output_dir: &Path,
) -> Result<ExitCode, CliError> {
    let spec = rtask.to_spec(seed)?;
    let cfg = rtrain.to_train_config(seed);
    let started = Instant::now();
    let report = train(&spec, &cfg).map_err(anyhow::Error::from)?;
    let wall = started.elapsed().as_secs_f64();

    let mut result = serde_json::to_value(&report).map_err(anyhow::Error::from)?;
    // wall time is sidecar data, not canonical payload
    result.as_object_mut().unwrap().remove("wall_time_seconds");
    let canonical = json!({
        "artifact_version": ARTIFACT_VERSION,
        "command": "train",
        "seed": seed,
        "config": { "task": rtask, "train": rtrain },
        "result": result,
    });
    let json_path = output_dir.join(format!("train-{seed}.json"));
    write_result(&json_path, &canonical, wall)?;
    let csv_path = output_dir.join(format!("train-{seed}.csv"));
    write_atomic(&csv_path, report.curves_csv().as_bytes())?;

    println!("final loss     {}", fmt_num(report.final_loss()));
    println!("checkpoints    {}", report.loss_curve.len());
    println!("report         {}", json_path.display());
    println!("loss csv       {}", csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eta(
    rtask: &ResolvedTask,
    samples: usize,
    jackknife: bool,
    seed: u64,
    output_dir: &Path,
) -> Result<ExitCode, CliError> {
    let stream = RngStream::new(seed).split(ETA_SPLIT);
    let opts = McOptions { jackknife };
    let spec = rtask.to_spec(seed)?;
    let started = Instant::now();
    let est: EtaEstimate = match &spec.kind {
        TaskKind::IsotropicLinear => {
            estimate_eta_linear_with(spec.d, spec.n, spec.sigma, samples, &stream, opts)
                .map_err(anyhow::Error::from)?
        }
        TaskKind::SkewedLinear { sigma_mat } => {
            estimate_eta_skewed_with(sigma_mat, spec.n, spec.sigma, samples, &stream, opts)
                .map_err(anyhow::Error::from)?
        }
        TaskKind::Nonlinear { target } => {
            estimate_eta_nonlinear_with(target, spec.n, spec.sigma, samples, &stream, opts)
                .map_err(anyhow::Error::from)?
        }
    };
    let wall = started.elapsed().as_secs_f64();

    let canonical = json!({
        "artifact_version": ARTIFACT_VERSION,
        "command": "eta",
        "seed": seed,
        "config": { "task": rtask, "samples": samples },
        "result": est,
    });
    let path = output_dir.join(format!("eta-{seed}.json"));
    write_result(&path, &canonical, wall)?;

    print_table(&[
        ("value", fmt_num(est.value)),
        ("stderr", fmt_num(est.stderr)),
        ("num_samples", est.num_samples.to_string()),
        ("numerator_mean", fmt_num(est.numerator_mean)),
        ("denominator_mean", fmt_num(est.denominator_mean)),
    ]);
    if let Some(j) = est.jackknife_stderr {
        print_table(&[("jackknife_stderr", fmt_num(j))]);
    }
    if est.negative_beyond(4.0) {
        eprintln!("warning: eta estimate is negative beyond 4 stderr; flagged, not failed");
    }
    println!("report         {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn run_one_suite(id: SuiteId, cfg: &SuiteConfig, output_dir: &Path) -> Result<bool, CliError> {
    let started = Instant::now();
    let result = run_suite(id, cfg).map_err(anyhow::Error::from)?;
    let wall = started.elapsed().as_secs_f64();
    let canonical = json!({
        "artifact_version": ARTIFACT_VERSION,
        "command": "verify",
        "result": serde_json::from_str::<Value>(&result.canonical_json())
            .map_err(anyhow::Error::from)?,
    });
    let path = output_dir.join(format!("{}.json", result.file_stem()));
    write_result(&path, &canonical, wall)?;

    println!("suite {} seed {}: {}", result.name, result.seed, pass_str(result.pass));
    let rows: Vec<(&str, String)> =
        result.metrics.iter().map(|(k, v)| (k.as_str(), fmt_num(*v))).collect();
    print_table(&rows);
    println!("report         {}", path.display());
    Ok(result.pass)
}

fn cmd_report(dir: &Path) -> Result<ExitCode, CliError> {
    let mut rows: Vec<(String, bool, u64, String)> = Vec::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => {
            eprintln!("no results found in {}", dir.display());
            return Ok(ExitCode::from(1));
        }
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let Ok(text) = std::fs::read_to_string(&path) else { continue };
        let Ok(doc) = serde_json::from_str::<Value>(&text) else { continue };
        let result = &doc["canonical"]["result"];
        let (Some(name), Some(pass), Some(seed)) = (
            result["name"].as_str(),
            result["pass"].as_bool(),
            result["seed"].as_u64(),
        ) else {
            continue;
        };
        let highlights: Vec<String> = result["metrics"]
            .as_object()
            .map(|m| {
                m.iter()
                    .take(4)
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect()
            })
            .unwrap_or_default();
        rows.push((name.to_string(), pass, seed, highlights.join(", ")));
    }
    if rows.is_empty() {
        eprintln!("no results found in {}", dir.display());
        return Ok(ExitCode::from(1));
    }

    let mut md = String::from("# Suite results\n\n| suite | pass | seed | highlights |\n|---|---|---|---|\n");
    for (name, pass, seed, highlights) in &rows {
        md.push_str(&format!("| {name} | {} | {seed} | {highlights} |\n", pass_str(*pass)));
    }
    let out = dir.join("summary.md");
    write_atomic(&out, md.as_bytes())?;
    print!("{md}");
    println!("\nwrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

// --- output helpers ----------------------------------------------------------

fn pass_str(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Format a float exactly as serde_json prints it, so tables and JSON files
/// carry identical digits.
fn fmt_num(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| "null".into())
}

fn print_table(rows: &[(&str, String)]) {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max(14);
    for (k, v) in rows {
        println!("{k:<width$} {v}");
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} into place", tmp.display()))?;
    Ok(())
}

/// Result envelope: deterministic `canonical` section plus a timing sidecar.
fn write_result(path: &Path, canonical: &Value, wall_time_seconds: f64) -> anyhow::Result<()> {
    let timestamp_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    let doc = json!({
        "canonical": canonical,
        "sidecar": {
            "wall_time_seconds": wall_time_seconds,
            "timestamp_unix_ms": timestamp_ms,
        },
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
