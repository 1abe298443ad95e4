//! `langrl` command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::env_core::EnvKind;
use crate::lm_backend::conformance::{backend_conformance, wire_conformance};
use crate::lm_backend::{BackendConfig, BackendKind};
use crate::pipelines::{validate_sft_file, PipelineKind};
use crate::util::to_jsonl;

use super::config::{parse_policy, ConfigError, RunConfig, RunMode};
use super::run::{label_states, run_experiment, LabelSplit, RESOLVED_CONFIG};
use super::{export_metrics, io_err, tree_digest, HarnessError, EXIT_BACKEND, EXIT_FAILURE, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "langrl", version, about = "Language-valued RL experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured pipeline, resuming after the last completed iteration.
    Run(RunArgs),
    /// Run the evaluation pipeline with the configured backends.
    Evaluate(RunArgs),
    /// Write Monte-Carlo advantage labels for Breakthrough states as JSONL.
    LabelStates(LabelArgs),
    /// Re-run a recorded run from its cache and compare checkpoint trees,
    /// or check a chat-completions endpoint against the backend contract.
    ReplayVerify(VerifyArgs),
    /// Flatten per-iteration metrics into a CSV file.
    ExportMetrics(ExportArgs),
    /// Check SFT JSONL files against the fine-tuning schema.
    ValidateSft(ValidateArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named profile instead of (or beneath) a config file.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long, value_parser = ["live", "record", "replay"])]
    mode: Option<String>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
struct LabelArgs {
    #[arg(long, default_value = "breakthrough")]
    env: String,
    #[arg(long, default_value_t = 100)]
    rollouts: u32,
    #[arg(long, default_value_t = 0.55)]
    threshold: f64,
    /// Number of states to label; 0 labels the whole split.
    #[arg(long, default_value_t = 200)]
    states: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rollout policy for both sides: uniform_random, first_available or mcts:<sims>:<rollouts>.
    #[arg(long, default_value = "uniform_random")]
    policy: String,
    #[arg(long, value_delimiter = ',', default_value = "2,10")]
    sim_grid: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "1,10")]
    rollout_grid: Vec<u32>,
    #[arg(long, default_value_t = 1)]
    games_per_pair: usize,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 8)]
    parallel: usize,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, conflicts_with = "endpoint", required_unless_present = "endpoint")]
    run_dir: Option<PathBuf>,
    /// Where the replayed run goes; a temporary directory when absent.
    #[arg(long, requires = "run_dir")]
    into: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value = "default")]
    model: String,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

/// Runs the command line and returns the process exit code.
pub fn cli_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { super::EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32, HarnessError> {
    match cmd {
        Command::Run(a) => run_cmd(a, None),
        Command::Evaluate(a) => run_cmd(a, Some(PipelineKind::Evaluate)),
        Command::LabelStates(a) => label_cmd(a),
        Command::ReplayVerify(a) => verify_cmd(a),
        Command::ExportMetrics(a) => {
            let path = export_metrics(&a.run_dir, a.out.as_deref())?;
            println!("{}", path.display());
            Ok(EXIT_OK)
        }
        Command::ValidateSft(a) => validate_cmd(a),
    }
}

fn validate_cmd(a: ValidateArgs) -> Result<i32, HarnessError> {
    let mut clean = true;
    for f in &a.files {
        let report = validate_sft_file(f).map_err(|e| io_err(f, e))?;
        println!(
            "{}: {} records, longest {} chars",
            f.display(),
            report.records,
            report.max_chars
        );
        for v in &report.violations {
            println!("  {v}");
        }
        clean &= report.is_valid();
    }
    Ok(if clean { EXIT_OK } else { EXIT_FAILURE })
}

fn resolve(a: &RunArgs, pipeline: Option<PipelineKind>) -> Result<RunConfig, HarnessError> {
    let mut cfg = match (&a.config, &a.profile) {
        (Some(path), None) => RunConfig::parse_file(path)?,
        (None, Some(p)) => RunConfig::profile(p)?,
        (Some(_), Some(_)) => {
            return Err(
                ConfigError::Invalid("name the profile inside the config file instead of --profile".into()).into(),
            )
        }
        (None, None) => return Err(ConfigError::Invalid("pass --config or --profile".into()).into()),
    };
    if let Some(s) = a.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &a.output {
        cfg.run.output_dir = o.clone();
    }
    if let Some(n) = a.iterations {
        cfg.run.iterations = n;
    }
    if let Some(m) = &a.mode {
        cfg.set("run.mode", m)?;
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("override `{o}` is not section.key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(p) = pipeline {
        cfg.run.pipeline = p;
    }
    Ok(cfg)
}

fn run_cmd(a: RunArgs, pipeline: Option<PipelineKind>) -> Result<i32, HarnessError> {
    let cfg = resolve(&a, pipeline)?;
    let summary = run_experiment(&cfg)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "run {} ({} iterations already complete)",
        summary.output_dir.display(),
        summary.resumed_from
    );
    for m in &summary.metrics {
        let acc = m.accuracy.map(|a| format!(" accuracy={a:.4}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "iteration {}: win={:.4} loss={:.4} tie={:.4} return={:.3}{acc} parse_failures={:.4}",
            m.iteration, m.win_rate, m.loss_rate, m.tie_rate, m.avg_return, m.parse_failure_rate
        );
    }
    Ok(EXIT_OK)
}

fn label_cmd(a: LabelArgs) -> Result<i32, HarnessError> {
    let kind: EnvKind = a
        .env
        .parse()
        .map_err(|e: crate::env_core::EnvError| ConfigError::Invalid(e.to_string()))?;
    if kind != EnvKind::Breakthrough {
        return Err(ConfigError::Invalid(format!("label-states supports breakthrough, not {kind}")).into());
    }
    let mut cfg = RunConfig::default();
    cfg.env.kind = kind;
    cfg.run.seed = a.seed;
    cfg.run.parallel = a.parallel;
    cfg.td.sim_grid = a.sim_grid;
    cfg.td.rollout_grid = a.rollout_grid;
    cfg.td.games_per_pair = a.games_per_pair;
    cfg.labels.rollouts = a.rollouts;
    cfg.labels.threshold = a.threshold;
    cfg.labels.states = a.states;
    cfg.labels.policy = parse_policy(&a.policy).map_err(|m| ConfigError::BadValue {
        section: "labels".into(),
        key: "policy".into(),
        value: a.policy.clone(),
        msg: m,
    })?;
    if !(0.5..1.0).contains(&cfg.labels.threshold) || cfg.labels.rollouts == 0 || cfg.run.parallel == 0 {
        return Err(ConfigError::Invalid(
            "threshold must lie in [0.5, 1); rollouts and parallel must be positive".into(),
        )
        .into());
    }
    let split = match a.split {
        SplitArg::Train => LabelSplit::Train,
        SplitArg::Test => LabelSplit::Test,
        SplitArg::All => LabelSplit::All,
    };
    let (_, labels) = label_states(&cfg, split)?;
    let body = to_jsonl(&labels).map_err(|e| HarnessError::Io(e.to_string()))?;
    match &a.out {
        Some(path) => {
            crate::util::atomic_write(path, body.as_bytes()).map_err(|e| io_err(path, e))?;
            eprintln!("{} labels written to {}", labels.len(), path.display());
        }
        None => print!("{body}"),
    }
    Ok(EXIT_OK)
}

fn verify_cmd(a: VerifyArgs) -> Result<i32, HarnessError> {
    if let Some(url) = &a.endpoint {
        let cfg = BackendConfig {
            kind: BackendKind::Http {
                base_url: url.clone(),
                model_name: a.model.clone(),
                api_key_env: None,
                timeout_secs: a.timeout_secs,
                max_retries: 0,
            },
            max_in_flight: a.max_in_flight,
        };
        let backend = cfg.build()?;
        let report = backend_conformance(backend.as_ref()).merge(wire_conformance(
            url,
            &a.model,
            Duration::from_secs(a.timeout_secs),
        ));
        println!("{}", report.render());
        return Ok(if report.passed() { EXIT_OK } else { EXIT_BACKEND });
    }
    let run_dir = a.run_dir.expect("clap requires run_dir without endpoint");
    let (same, original, replayed) = replay_verify(&run_dir, a.into.as_deref())?;
    println!("original {original}\nreplayed {replayed}");
    if same {
        println!("checkpoint trees identical");
        Ok(EXIT_OK)
    } else {
        Err(HarnessError::Verify("checkpoint trees differ".into()))
    }
}

/// Re-runs the run in `run_dir` against its recorded cache and compares
/// tree digests. Returns (equal, original digest, replayed digest).
pub fn replay_verify(run_dir: &Path, into: Option<&Path>) -> Result<(bool, String, String), HarnessError> {
    let mut cfg = RunConfig::parse_file(&run_dir.join(RESOLVED_CONFIG))?;
    let cache = cfg.cache_dir();
    let cache = if cache.is_dir() { cache } else { run_dir.join("cache") };
    cfg.run.cache_dir = Some(cache);
    cfg.run.mode = RunMode::Replay;
    let scratch;
    let target = match into {
        Some(p) => p.to_path_buf(),
        None => {
            let nanos = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or_default();
            scratch = std::env::temp_dir().join(format!("langrl-replay-{}-{nanos}", std::process::id()));
            scratch.clone()
        }
    };
    cfg.run.output_dir = target.clone();
    let result = run_experiment(&cfg).and_then(|_| Ok((tree_digest(run_dir)?, tree_digest(&target)?)));
    if into.is_none() {
        let _ = std::fs::remove_dir_all(&target);
    }
    let (original, replayed) = result?;
    Ok((original == replayed, original, replayed))
}
