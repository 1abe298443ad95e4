//! Drives a configured pipeline through its iterations, writing one
//! checkpoint directory per iteration and resuming after the last
//! completed one.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::env_core::{derive_seed, EnvKind, Player, State};
use crate::environments::breakthrough::BreakthroughBoard;
use crate::environments::EnvSpec;
use crate::lm_backend::{OracleBackend, RecordingBackend, ReplayBackend, SftLookupBackend, SharedBackend};
use crate::oracles::winrate::{label_state, AdvantageLabel, PolicyPair};
use crate::pipelines::checkpoint::{completed_iterations, IterationArtifacts};
use crate::pipelines::trace::{Phase, TraceLog};
use crate::pipelines::{
    build_state_dataset, build_td_buffer, evaluate_policy, evaluate_value_accuracy, format_ablation_table,
    generate_td_training_set, run_actor_critic_iteration, run_gpi_ablation, run_language_gpi, with_pool, AcBackends,
    IterationMetrics, PipelineError, PipelineKind, StateDataset, TrainingSet,
};
use crate::prompt_kit::TemplateRegistry;
use crate::util::{atomic_write, read_jsonl};
use crate::value_ops::ValueOps;

use super::config::{BackendSource, BackendSpec, RunConfig, RunMode};
use super::{io_err, HarnessError};

/// The fully materialised config, written into every run directory.
pub const RESOLVED_CONFIG: &str = "config.resolved.cfg";
pub const ABLATION_TABLE: &str = "gpi_ablation.md";
pub const ABLATION_ROWS: &str = "gpi_ablation.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    /// Iterations found complete on disk before this invocation.
    pub resumed_from: u32,
    pub metrics: Vec<IterationMetrics>,
}

/// Backends by role. Policy and value sit behind lookup tables so emitted
/// sets can be absorbed between iterations.
struct RoleBackends {
    policy: Arc<SftLookupBackend>,
    value: Arc<SftLookupBackend>,
    aggregator: SharedBackend,
    improver: SharedBackend,
}

fn build_role(
    cfg: &RunConfig,
    spec: &BackendSpec,
    role: &str,
    registry: &Arc<TemplateRegistry>,
) -> Result<SharedBackend, HarnessError> {
    let cache = cfg.cache_dir().join(role);
    if cfg.run.mode == RunMode::Replay {
        return Ok(Arc::new(
            ReplayBackend::new(cache, true, None).with_max_in_flight(spec.max_in_flight),
        ));
    }
    let lib = spec.to_backend_config(&cfg.env);
    let base: SharedBackend = match &spec.source {
        BackendSource::Oracle(_) => {
            lib.validate()?;
            let crate::lm_backend::BackendKind::Oracle { env_kind, options } = lib.kind else {
                unreachable!("oracle source maps to an oracle backend")
            };
            Arc::new(
                OracleBackend::new(env_kind, options)?
                    .with_registry(registry.clone())
                    .with_max_in_flight(spec.max_in_flight),
            )
        }
        _ => lib.build()?,
    };
    Ok(match cfg.run.mode {
        RunMode::Record => Arc::new(RecordingBackend::new(base, cache)),
        _ => base,
    })
}

fn build_backends(cfg: &RunConfig, registry: &Arc<TemplateRegistry>) -> Result<RoleBackends, HarnessError> {
    let policy = Arc::new(SftLookupBackend::new(build_role(
        cfg,
        &cfg.backends.policy,
        "policy",
        registry,
    )?));
    let value = Arc::new(SftLookupBackend::new(build_role(
        cfg,
        &cfg.backends.value,
        "value",
        registry,
    )?));
    let aggregator = build_role(cfg, &cfg.backends.aggregator, "aggregator", registry)?;
    let improver: SharedBackend = match &cfg.backends.improver {
        Some(spec) => build_role(cfg, spec, "improver", registry)?,
        None => policy.clone(),
    };
    Ok(RoleBackends {
        policy,
        value,
        aggregator,
        improver,
    })
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    spec: EnvSpec,
    ops: ValueOps,
    b: RoleBackends,
    root: &'a Path,
}

/// Validates, then runs the configured pipeline from the first missing
/// iteration onward.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let registry = cfg.registry()?;
    let spec = cfg.env_spec()?;
    let root = cfg.run.output_dir.as_path();
    std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let resolved = root.join(RESOLVED_CONFIG);
    atomic_write(&resolved, cfg.to_ini().as_bytes()).map_err(|e| io_err(&resolved, e))?;
    let ops = ValueOps::new(registry.clone())
        .with_params(cfg.sampling.clone())
        .with_retry_budget(cfg.retry_budget);
    let ctx = Ctx {
        cfg,
        spec,
        ops,
        b: build_backends(cfg, &registry)?,
        root,
    };
    let done = completed_iterations(root).min(cfg.run.iterations);
    match cfg.run.pipeline {
        PipelineKind::Gpi => run_gpi(&ctx, done)?,
        PipelineKind::TdTrain => run_td(&ctx, done)?,
        PipelineKind::ActorCritic => run_ac(&ctx, done)?,
        PipelineKind::Evaluate => run_evaluate(&ctx, done)?,
    }
    let mut metrics = Vec::new();
    for k in 0..completed_iterations(root) {
        if let Some(a) = IterationArtifacts::read(root, k)? {
            metrics.push(a.metrics);
        }
    }
    Ok(RunSummary {
        output_dir: root.to_path_buf(),
        resumed_from: done,
        metrics,
    })
}

fn run_gpi(ctx: &Ctx, done: u32) -> Result<(), HarnessError> {
    let cfg = ctx.cfg;
    for k in done..cfg.run.iterations {
        let gpi = crate::pipelines::GpiConfig {
            seed: derive_seed(cfg.run.seed, &[u64::from(k)]),
            ..cfg.gpi_config()
        };
        let report = run_language_gpi(
            &ctx.spec,
            &gpi,
            &ctx.ops,
            ctx.b.policy.as_ref(),
            ctx.b.value.as_ref(),
            ctx.b.aggregator.as_ref(),
        )?;
        let mut metrics = report.metrics.clone();
        metrics.iteration = k;
        IterationArtifacts {
            trajectories: report.trajectories,
            value_set: TrainingSet::default(),
            policy_set: TrainingSet::default(),
            metrics,
            trace: report.trace,
        }
        .write(ctx.root)?;
    }
    if cfg.gpi.ablation {
        let rows = run_gpi_ablation(
            &ctx.spec,
            &cfg.gpi_config(),
            &cfg.gpi.grid_k,
            &cfg.gpi.grid_n,
            &ctx.ops,
            ctx.b.policy.as_ref(),
            ctx.b.value.as_ref(),
            ctx.b.aggregator.as_ref(),
        )?;
        let table = ctx.root.join(ABLATION_TABLE);
        atomic_write(&table, format_ablation_table(&rows, &cfg.env.layout).as_bytes())
            .map_err(|e| io_err(&table, e))?;
        let json = ctx.root.join(ABLATION_ROWS);
        let body = serde_json::to_string_pretty(&rows).map_err(|e| io_err(&json, e))? + "\n";
        atomic_write(&json, body.as_bytes()).map_err(|e| io_err(&json, e))?;
    }
    Ok(())
}

fn state_dataset(cfg: &RunConfig) -> Result<StateDataset, HarnessError> {
    Ok(build_state_dataset(
        &cfg.td.sim_grid,
        &cfg.td.rollout_grid,
        cfg.td.games_per_pair,
        cfg.run.seed,
        cfg.run.parallel,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSplit {
    Train,
    Test,
    All,
}

/// Advantage labels for Breakthrough states from the configured state
/// dataset, at most `labels.states` of them (0 keeps all).
pub fn label_states(cfg: &RunConfig, split: LabelSplit) -> Result<(Vec<State>, Vec<AdvantageLabel>), HarnessError> {
    let data = state_dataset(cfg)?;
    let mut states: Vec<State> = match split {
        LabelSplit::Train => data.train,
        LabelSplit::Test => data.test,
        LabelSplit::All => data.train.into_iter().chain(data.test).collect(),
    };
    if cfg.labels.states > 0 {
        states.truncate(cfg.labels.states);
    }
    let labels = label_list(cfg, &states)?;
    Ok((states, labels))
}

fn label_list(cfg: &RunConfig, states: &[State]) -> Result<Vec<AdvantageLabel>, HarnessError> {
    let pair = PolicyPair {
        white: cfg.labels.policy.clone(),
        black: cfg.labels.policy.clone(),
    };
    let l = &cfg.labels;
    let labels = with_pool(cfg.run.parallel, || {
        states
            .par_iter()
            .map(|s| label_state(s, &pair, l.rollouts, l.threshold, cfg.run.seed))
            .collect::<Result<Vec<_>, _>>()
    })?
    .map_err(PipelineError::from)?;
    Ok(labels)
}

/// Labelled test states: from `evaluate.labels` when set, else generated.
fn test_labels(
    cfg: &RunConfig,
    data: Option<&StateDataset>,
) -> Result<(Vec<State>, Vec<AdvantageLabel>), HarnessError> {
    if let Some(path) = &cfg.evaluate.labels {
        let labels: Vec<AdvantageLabel> = read_jsonl(path).map_err(|e| io_err(path, e))?;
        let states = labels
            .iter()
            .map(|l| BreakthroughBoard::parse(&l.state_text, None).map(State::Breakthrough))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| io_err(path, e))?;
        return Ok((states, labels));
    }
    let mut states = match data {
        Some(d) => d.test.clone(),
        None => state_dataset(cfg)?.test,
    };
    if cfg.labels.states > 0 {
        states.truncate(cfg.labels.states);
    }
    let labels = label_list(cfg, &states)?;
    Ok((states, labels))
}

fn run_td(ctx: &Ctx, done: u32) -> Result<(), HarnessError> {
    let cfg = ctx.cfg;
    let data = state_dataset(cfg)?;
    let mut train = data.train.clone();
    if cfg.td.max_states > 0 {
        train.truncate(cfg.td.max_states);
    }
    let pair = PolicyPair {
        white: cfg.td.rollout_policy.clone(),
        black: cfg.td.rollout_policy.clone(),
    };
    let buffer = build_td_buffer(
        &train,
        &pair,
        cfg.td.lookahead,
        cfg.td.variations,
        cfg.td.distinctness,
        cfg.run.seed,
        cfg.run.parallel,
    )?;
    let labelled = if cfg.td.accuracy {
        Some(test_labels(cfg, Some(&data))?)
    } else {
        None
    };
    for k in 0..done {
        if cfg.run.absorb {
            if let Some(a) = IterationArtifacts::read(ctx.root, k)? {
                ctx.b.value.absorb(a.value_set.pairs());
            }
        }
    }
    for k in done..cfg.run.iterations {
        let before = ctx.ops.stats();
        let out = generate_td_training_set(
            &buffer,
            &ctx.ops,
            ctx.b.value.as_ref(),
            ctx.b.aggregator.as_ref(),
            k,
            cfg.run.parallel,
        )?;
        let delta = ctx.ops.stats().since(&before);
        if cfg.run.absorb {
            ctx.b.value.absorb(out.set.pairs());
        }
        let mut metrics = IterationMetrics::empty(k);
        metrics.parse_failure_rate = rate(delta.parse_failures, delta.calls);
        metrics.fallback_rate = rate(delta.fallbacks, delta.calls);
        metrics.value_examples = out.set.len();
        metrics.failed_states = out.dropped;
        let mut trace = out.trace;
        if let Some((states, labels)) = &labelled {
            let r = evaluate_value_accuracy(states, labels, ctx.b.value.as_ref(), &ctx.ops, cfg.run.parallel)?;
            metrics.accuracy = Some(r.accuracy);
            metrics.episodes = r.evaluated;
            let mut eval = TraceLog::new();
            eval.push(0, Phase::Evaluate, "value_accuracy", r.evaluated);
            eval.push(0, Phase::Emit, "metrics", 1);
            trace.append(eval);
        }
        IterationArtifacts {
            trajectories: buffer
                .entries
                .iter()
                .flat_map(|e| e.variations.iter().cloned())
                .collect(),
            value_set: out.set,
            policy_set: TrainingSet::default(),
            metrics,
            trace,
        }
        .write(ctx.root)?;
    }
    Ok(())
}

fn rate(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// This iteration's own value examples out of a merged checkpoint set.
fn own_value_set(merged: &TrainingSet, k: u32) -> TrainingSet {
    TrainingSet::new(
        merged
            .examples
            .iter()
            .filter(|e| e.tags.iteration == k)
            .cloned()
            .collect(),
    )
}

fn run_ac(ctx: &Ctx, done: u32) -> Result<(), HarnessError> {
    let cfg = ctx.cfg;
    let ac = cfg.ac_config();
    let mut history = Vec::new();
    for k in 0..done {
        let a = IterationArtifacts::read(ctx.root, k)?
            .ok_or_else(|| HarnessError::Io(format!("iteration {k} vanished during resume")))?;
        if cfg.run.absorb {
            ctx.b.value.absorb(a.value_set.pairs());
            ctx.b.policy.absorb(a.policy_set.pairs());
        }
        history.push(own_value_set(&a.value_set, k));
    }
    let tuner = cfg.run.absorb.then_some(ctx.b.value.as_ref());
    for k in done..cfg.run.iterations {
        let backends = AcBackends {
            policy: ctx.b.policy.as_ref(),
            evaluator: ctx.b.aggregator.as_ref(),
            value: ctx.b.value.as_ref(),
            improver: ctx.b.improver.as_ref(),
            value_tuner: tuner,
        };
        let out = run_actor_critic_iteration(&ctx.spec, &ac, &ctx.ops, &backends, &history, k)?;
        history.push(out.value_set.clone());
        if cfg.run.absorb {
            ctx.b.policy.absorb(out.policy_set.pairs());
        }
        let mut metrics = out.metrics.clone();
        let mut trace = out.trace;
        if cfg.evaluate.games > 0 {
            let eval = evaluate_policy(&ctx.spec, ctx.b.policy.as_ref(), &ctx.ops, &cfg.eval_config(), k)?;
            metrics.win_rate = eval.win_rate;
            metrics.loss_rate = eval.loss_rate;
            metrics.tie_rate = eval.tie_rate;
            metrics.avg_return = eval.avg_return;
            metrics.return_std = eval.return_std;
            metrics.episodes = eval.episodes;
            let mut t = TraceLog::new();
            t.push(0, Phase::Rollout, "evaluation_games", eval.episodes);
            t.push(0, Phase::Evaluate, "score_games", eval.episodes);
            t.push(0, Phase::Emit, "metrics", 1);
            trace.append(t);
        }
        IterationArtifacts {
            trajectories: out.trajectories,
            value_set: out.merged,
            policy_set: out.policy_set,
            metrics,
            trace,
        }
        .write(ctx.root)?;
    }
    Ok(())
}

fn run_evaluate(ctx: &Ctx, done: u32) -> Result<(), HarnessError> {
    let cfg = ctx.cfg;
    for k in done..cfg.run.iterations {
        let mut trace = TraceLog::new();
        let metrics = if cfg.env.kind == EnvKind::Breakthrough {
            let (states, labels) = test_labels(cfg, None)?;
            trace.push(0, Phase::Rollout, "label_states", labels.len());
            let r = evaluate_value_accuracy(&states, &labels, ctx.b.value.as_ref(), &ctx.ops, cfg.run.parallel)?;
            trace.push(0, Phase::Evaluate, "value_accuracy", r.evaluated);
            let mut m = IterationMetrics::empty(k);
            m.accuracy = Some(r.accuracy);
            m.episodes = r.evaluated;
            m.parse_failure_rate = rate(r.unparseable as u64, r.evaluated as u64);
            m
        } else {
            let eval = crate::pipelines::EvalConfig {
                seed: derive_seed(cfg.run.seed, &[u64::from(k)]),
                agent: if cfg.env.kind.is_two_player() {
                    cfg.evaluate.agent
                } else {
                    Player::Agent
                },
                ..cfg.eval_config()
            };
            let m = evaluate_policy(&ctx.spec, ctx.b.policy.as_ref(), &ctx.ops, &eval, k)?;
            trace.push(0, Phase::Rollout, "evaluation_games", m.episodes);
            trace.push(0, Phase::Evaluate, "score_games", m.episodes);
            m
        };
        trace.push(0, Phase::Emit, "metrics", 1);
        IterationArtifacts {
            trajectories: Vec::new(),
            value_set: TrainingSet::default(),
            policy_set: TrainingSet::default(),
            metrics,
            trace,
        }
        .write(ctx.root)?;
    }
    Ok(())
}
