use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use slap::data::{generate_corpus, CorpusConfig, Manifest};
use slap::eval::{evaluate, EvalMode, EvalOptions, EvalReport, DEFAULT_REG};
use slap::gradcheck::{self, GradCheckConfig};
use slap::model::SlapModel;
use slap::prompts::{TaskRegistry, TaskSpec};
use slap::train::{run, RunConfig, RunOptions, TrainCheckpoint};

const RUN_RECORD: &str = "run.json";

/// Bad flags, configs or input paths; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "slap", version, about = "Speaker contrastive language-audio pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of WAV files and a manifest
    Synth(SynthArgs),
    /// Pretrain a model on one or more manifests
    Pretrain(PretrainArgs),
    /// Zero-shot evaluation with prompt pairs
    Zeroshot(EvalArgs),
    /// Linear-probe evaluation
    Probe(ProbeArgs),
    /// Evaluate any combination of zeroshot, probe and naive
    Evaluate(EvaluateArgs),
    /// Print the summary table of a saved report
    Report(ReportArgs),
    /// Run the finite-difference gradient checks
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct OutArg {
    /// Output directory
    #[arg(long, env = "SLAP_OUT_DIR", default_value = "slap-out")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    speakers: usize,
    #[arg(long, default_value_t = 3)]
    clips_per: usize,
    #[arg(long, default_value_t = 1.0)]
    clip_seconds: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct PretrainArgs {
    /// Run config JSON; desk defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    manifests: Vec<PathBuf>,
    /// Resume from a training checkpoint
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Print losses every N steps (0 = quiet)
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    manifests: Vec<PathBuf>,
    /// Task registry JSON; the bundled registry when omitted
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Comma-separated task ids; every task matching a loaded corpus when omitted
    #[arg(long, value_delimiter = ',')]
    task_ids: Vec<String>,
    /// Run config whose model dimensions the checkpoint must match
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write per-clip zero-shot margins
    #[arg(long)]
    margins: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// L2 penalty of the logistic regression
    #[arg(long, default_value_t = DEFAULT_REG)]
    reg: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_delimiter = ',', default_value = "zeroshot,probe,naive")]
    modes: Vec<EvalMode>,
    #[arg(long, default_value_t = DEFAULT_REG)]
    reg: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON written by an evaluation
    input: PathBuf,
    /// Also write the rows as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only ops whose name contains this
    #[arg(long)]
    filter: Option<String>,
    /// Write the report as JSON
    #[arg(long)]
    json: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Zeroshot(a) => eval_cmd("zeroshot", a, vec![EvalMode::Zeroshot], DEFAULT_REG),
        Command::Probe(a) => eval_cmd("probe", a.eval, vec![EvalMode::Probe], a.reg),
        Command::Evaluate(a) => eval_cmd("evaluate", a.eval, a.modes, a.reg),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
    .map(|()| ExitCode::SUCCESS)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_run_record(dir: &Path, command: &str, seed: Option<u64>, config: Value, inputs: Value) -> Result<()> {
    let record = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "inputs": inputs,
    });
    let path = dir.join(RUN_RECORD);
    let text = serde_json::to_string_pretty(&record)? + "\n";
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn paths_json(paths: &[PathBuf]) -> Value {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = CorpusConfig {
        n_speakers: a.speakers,
        clips_per_speaker: a.clips_per,
        clip_duration_s: a.clip_seconds,
        test_fraction: a.test_fraction,
        seed: a.seed,
    };
    let corpus = generate_corpus(&cfg).map_err(|e| usage(e.to_string()))?;
    let dir = &a.out.out;
    create_dir(dir)?;
    let manifest = corpus.write(dir)?;
    write_run_record(
        dir,
        "synth",
        Some(a.seed),
        json!({
            "speakers": a.speakers,
            "clips_per": a.clips_per,
            "clip_seconds": a.clip_seconds,
            "test_fraction": a.test_fraction,
        }),
        json!({}),
    )?;
    println!("{}", manifest.display());
    Ok(())
}

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<Manifest>> {
    paths
        .iter()
        .map(|p| {
            if !p.is_file() {
                return Err(usage(format!("manifest not found: {}", p.display())));
            }
            Manifest::load(p).with_context(|| format!("loading manifest {}", p.display()))
        })
        .collect()
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("reading config {}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = load_run_config(a.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(v) = a.steps {
        t.total_steps = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.lambda {
        t.lambda = v;
    }
    if let Some(v) = a.lr {
        t.base_lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let manifests = load_manifests(&a.manifests)?;
    let resume = match &a.from {
        Some(p) if !p.is_file() => return Err(usage(format!("checkpoint not found: {}", p.display()))),
        Some(p) => Some(TrainCheckpoint::load(p)?),
        None => None,
    };

    let dir = &a.out.out;
    create_dir(dir)?;
    write_run_record(
        dir,
        "pretrain",
        Some(cfg.train.seed),
        serde_json::to_value(&cfg)?,
        json!({
            "manifests": paths_json(&a.manifests),
            "resume": a.from.as_ref().map(|p| p.display().to_string()),
        }),
    )?;
    let every = a.log_every;
    let summary = run(
        &cfg,
        &manifests,
        &RunOptions {
            out_dir: dir.clone(),
            resume,
        },
        &mut |m| {
            if every > 0 && (m.step + 1) % every == 0 {
                eprintln!(
                    "step {:>6}  lr {:.3e}  clap {:.4}  mae {:.4}  total {:.4}  tau {:.4}",
                    m.step + 1,
                    m.lr,
                    m.clap,
                    m.mae,
                    m.total,
                    m.tau
                );
            }
        },
    )?;
    eprintln!(
        "trained steps {}..{} in {:.1}s ({} faults)",
        summary.start_step, summary.end_step, summary.wall_seconds, summary.faults
    );
    println!("{}", summary.final_checkpoint.display());
    Ok(())
}

fn select_tasks(a: &EvalArgs, manifests: &[Manifest]) -> Result<Vec<TaskSpec>> {
    let registry = match &a.tasks {
        None => TaskRegistry::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("reading tasks {}: {e}", p.display())))?;
            TaskRegistry::from_json(&text).map_err(|e| usage(format!("tasks {}: {e}", p.display())))?
        }
    };
    if !a.task_ids.is_empty() {
        return registry.select(&a.task_ids).map_err(|e| usage(e.to_string()));
    }
    let tasks: Vec<TaskSpec> = registry
        .tasks
        .into_iter()
        .filter(|t| manifests.iter().any(|m| t.applies_to_corpus(&m.corpus_id)))
        .collect();
    if tasks.is_empty() {
        return Err(usage("no task in the registry applies to the given manifests"));
    }
    Ok(tasks)
}

fn load_model(a: &EvalArgs) -> Result<SlapModel> {
    let path = a
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage("--checkpoint is required for zeroshot and probe modes"))?;
    if !path.is_file() {
        return Err(usage(format!("checkpoint not found: {}", path.display())));
    }
    let model = SlapModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if let Some(cfg_path) = &a.config {
        let cfg = load_run_config(Some(cfg_path))?;
        let (want, have) = (cfg.model.dimension_signature(), model.config().dimension_signature());
        if want != have {
            return Err(usage(format!(
                "checkpoint/config mismatch: checkpoint has [{have}], config {} has [{want}]",
                cfg_path.display()
            )));
        }
    }
    Ok(model)
}

fn eval_cmd(command: &str, a: EvalArgs, modes: Vec<EvalMode>, reg: f64) -> Result<()> {
    if modes.is_empty() {
        return Err(usage("no evaluation modes given"));
    }
    let manifests = load_manifests(&a.manifests)?;
    let tasks = select_tasks(&a, &manifests)?;
    let model = if modes.iter().any(|m| m.needs_model()) {
        Some(load_model(&a)?)
    } else {
        None
    };
    let opts = EvalOptions {
        modes: modes.clone(),
        probe_reg: reg,
        margins: a.margins,
    };
    let report = evaluate(&manifests, &tasks, model.as_ref(), &opts)?;

    let dir = &a.out.out;
    create_dir(dir)?;
    write_run_record(
        dir,
        command,
        None,
        json!({
            "modes": modes.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
            "probe_reg": reg,
            "tasks": tasks.iter().map(|t| t.task_id.as_str()).collect::<Vec<_>>(),
            "model": model.as_ref().map(|m| m.config().clone()),
        }),
        json!({
            "checkpoint": a.checkpoint.as_ref().map(|p| p.display().to_string()),
            "manifests": paths_json(&a.manifests),
            "tasks": a.tasks.as_ref().map(|p| p.display().to_string()),
        }),
    )?;
    report.write_json(&dir.join("report.json"))?;
    report.write_csv(&dir.join("report.csv"))?;
    if a.margins {
        report.write_margins_csv(&dir.join("margins.csv"))?;
    }
    print!("{}", report.summary_table());
    let skipped = report.rows.iter().filter(|r| r.skipped.is_some()).count();
    if skipped > 0 {
        eprintln!("{skipped} task/mode rows skipped; see report.csv");
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).map_err(|e| usage(format!("reading {}: {e}", a.input.display())))?;
    let report = EvalReport::from_json(&text).map_err(|e| usage(format!("{}: {e}", a.input.display())))?;
    if let Some(csv) = &a.csv {
        report.write_csv(csv)?;
    }
    for r in &report.rows {
        let f1 = r.f1.map_or_else(|| "-".to_string(), |f| format!("{f:.3}"));
        println!("{:<28} {:<9} {:>6}  {}", r.task_id, r.mode.as_str(), f1, r.skipped.as_deref().unwrap_or(""));
    }
    println!();
    print!("{}", report.summary_table());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let cfg = GradCheckConfig {
        cases: a.cases,
        seed: a.seed,
        ..Default::default()
    };
    let report = gradcheck::run(&cfg, a.filter.as_deref())?;
    if report.results.is_empty() {
        return Err(usage(format!(
            "no op matches {:?}; ops: {}",
            a.filter.unwrap_or_default(),
            gradcheck::op_names().join(", ")
        )));
    }
    for r in &report.results {
        println!(
            "{:<20} {:>4} cases  max rel err {:.2e}  {}",
            r.op,
            r.cases,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    println!("{} ops in {:.2}s", report.results.len(), report.seconds);
    if let Some(p) = &a.json {
        fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    anyhow::ensure!(report.all_passed(), "gradient check failed");
    Ok(())
}
