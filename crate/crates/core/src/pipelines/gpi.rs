//! Policy iteration by prompting: every decision evaluates each legal action
//! with short look-ahead variations, aggregates them and lets the improver
//! pick the move.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env_core::{
    derive_seed, rng_from, trajectory_return, AgentAction, EnvKind, Outcome, Player, State, Trajectory,
};
use crate::environments::{uniform_random, EnvSpec};
use crate::lm_backend::Backend;
use crate::value_ops::{prompts::narrate, CandidateEvaluationSet, ValueOps, VariationPacket};

use super::trace::{Phase, TraceLog};
use super::{mean_std, ratio, with_pool, IterationMetrics, PipelineError, Tally};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutPolicy {
    UniformRandom,
    LanguagePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpiConfig {
    /// Variations per candidate action (K).
    pub variations: usize,
    /// Steps per variation including the candidate action (N).
    pub lookahead_steps: usize,
    pub rollout_policy: RolloutPolicy,
    /// Number of start cells to evaluate; 0 means all.
    pub eval_starts: usize,
    pub seeds_per_start: usize,
    pub seed: u64,
    pub parallel: usize,
}

impl Default for GpiConfig {
    fn default() -> Self {
        GpiConfig {
            variations: 8,
            lookahead_steps: 3,
            rollout_policy: RolloutPolicy::UniformRandom,
            eval_starts: 30,
            seeds_per_start: 3,
            seed: 0,
            parallel: 8,
        }
    }
}

impl GpiConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.variations == 0 || self.lookahead_steps == 0 || self.seeds_per_start == 0 || self.parallel == 0 {
            return Err(PipelineError::Config(
                "variations, lookahead_steps, seeds_per_start and parallel must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpiEpisode {
    pub start: usize,
    pub seed: u64,
    pub steps: usize,
    pub success: bool,
    pub episode_return: f64,
    /// Set when the episode was abandoned and scored at the step-cap penalty.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpiReport {
    pub episodes: Vec<GpiEpisode>,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_steps: f64,
    pub metrics: IterationMetrics,
    pub trajectories: Vec<Trajectory>,
    pub trace: TraceLog,
}

struct EpisodeRun {
    summary: GpiEpisode,
    trajectory: Trajectory,
    trace: TraceLog,
    decisions: u64,
    fallbacks: u64,
}

struct Backends<'a> {
    policy: &'a dyn Backend,
    value: &'a dyn Backend,
    agg: &'a dyn Backend,
}

fn step_cap(spec: &EnvSpec) -> u16 {
    match spec {
        EnvSpec::Maze { step_cap, .. } | EnvSpec::FrozenLake { step_cap, .. } => *step_cap,
        _ => u16::MAX,
    }
}

fn rollout_action(
    state: &State,
    cfg: &GpiConfig,
    ops: &ValueOps,
    policy: &dyn Backend,
    seed: u64,
    rng: &mut crate::env_core::Rng,
) -> Result<AgentAction, PipelineError> {
    if cfg.rollout_policy == RolloutPolicy::LanguagePolicy {
        if let Some(a) = ops.policy_move(state, policy, seed)?.action {
            return Ok(a);
        }
    }
    Ok(uniform_random(state, rng)?)
}

/// `action` followed by up to N-1 rollout steps.
fn variation(
    state: &State,
    action: &AgentAction,
    cfg: &GpiConfig,
    ops: &ValueOps,
    policy: &dyn Backend,
    seed: u64,
) -> Result<Trajectory, PipelineError> {
    let mut rng = rng_from(seed);
    let mut traj = Trajectory::new(seed);
    let mut t = state.apply(action, &mut rng)?;
    for step in 1..cfg.lookahead_steps {
        if t.state_after.is_terminal() {
            break;
        }
        let next = t.state_after.clone();
        traj.transitions.push(t);
        let a = rollout_action(&next, cfg, ops, policy, derive_seed(seed, &[step as u64]), &mut rng)?;
        t = next.apply(&a, &mut rng)?;
    }
    traj.transitions.push(t);
    Ok(traj)
}

/// One decision: evaluate every legal action by look-ahead, then improve.
fn decide(
    state: &State,
    cfg: &GpiConfig,
    ops: &ValueOps,
    b: &Backends,
    seed: u64,
    block: u64,
    trace: &mut TraceLog,
) -> Result<(AgentAction, bool), PipelineError> {
    let legal = state.legal_actions()?;
    let mut variations = Vec::with_capacity(legal.len());
    for a in &legal {
        let vs = (0..cfg.variations)
            .map(|k| {
                variation(
                    state,
                    a,
                    cfg,
                    ops,
                    b.policy,
                    derive_seed(seed, &[u64::from(a.id), k as u64]),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        variations.push(vs);
    }
    trace.push(block, Phase::Rollout, "variations", legal.len() * cfg.variations);
    let mut packets = Vec::with_capacity(legal.len());
    for vs in &variations {
        let mut ps = Vec::with_capacity(vs.len());
        for v in vs {
            let end = v.final_state().expect("variation has a step");
            ps.push(VariationPacket {
                move_description: narrate(v, state.kind())?,
                successor_text: end.text(),
                successor_evaluation: ops.query_value(end, None, b.value)?,
            });
        }
        packets.push(ps);
    }
    trace.push(block, Phase::Evaluate, "terminal_values", legal.len() * cfg.variations);
    let entries = legal
        .iter()
        .zip(&packets)
        .map(|(a, ps)| Ok((a.clone(), ops.language_td_target(state, Some(a), ps, b.agg)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    trace.push(block, Phase::Aggregate, "action_values", entries.len());
    let cands = CandidateEvaluationSet::new(state.clone(), entries)?;
    let imp = ops.improve_policy(&cands, b.policy)?;
    trace.push(block, Phase::Improve, "select_action", 1);
    Ok((imp.action, imp.fallback_used))
}

fn run_episode(
    start_idx: usize,
    start: &State,
    seed: u64,
    cap: u16,
    cfg: &GpiConfig,
    ops: &ValueOps,
    b: &Backends,
) -> Result<EpisodeRun, PipelineError> {
    let mut trace = TraceLog::new();
    let mut traj = Trajectory::new(seed);
    let mut rng = rng_from(seed);
    let mut state = start.clone();
    let (mut decisions, mut fallbacks) = (0u64, 0u64);
    let mut error = None;
    while !state.is_terminal() {
        let block = decisions;
        let step = decide(&state, cfg, ops, b, derive_seed(seed, &[decisions]), block, &mut trace)
            .and_then(|(a, fb)| Ok((state.apply(&a, &mut rng)?, fb)));
        match step {
            Ok((t, fb)) => {
                decisions += 1;
                fallbacks += u64::from(fb);
                state = t.state_after.clone();
                traj.transitions.push(t);
                trace.push(block, Phase::Emit, "step", 1);
            }
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    let success = traj.outcome() == Some(Outcome::Success);
    let (steps, episode_return) = if error.is_some() {
        (usize::from(cap), -f64::from(cap))
    } else {
        (traj.len(), trajectory_return(&traj, 1.0))
    };
    Ok(EpisodeRun {
        summary: GpiEpisode {
            start: start_idx,
            seed,
            steps,
            success,
            episode_return,
            error,
        },
        trajectory: traj,
        trace,
        decisions,
        fallbacks,
    })
}

/// Plays `seeds_per_start` episodes from each selected start state and
/// reports the mean and standard deviation of episode returns.
pub fn run_language_gpi(
    spec: &EnvSpec,
    cfg: &GpiConfig,
    ops: &ValueOps,
    policy: &dyn Backend,
    value: &dyn Backend,
    agg: &dyn Backend,
) -> Result<GpiReport, PipelineError> {
    cfg.validate()?;
    if spec.kind() != EnvKind::Maze {
        return Err(PipelineError::Config(format!(
            "look-ahead policy iteration needs a maze, not {}",
            spec.kind()
        )));
    }
    let starts = spec.start_states()?;
    let chosen: Vec<usize> = if cfg.eval_starts == 0 || cfg.eval_starts >= starts.len() {
        (0..starts.len()).collect()
    } else {
        let mut idx = sample(&mut rng_from(cfg.seed), starts.len(), cfg.eval_starts).into_vec();
        idx.sort_unstable();
        idx
    };
    let tasks: Vec<(usize, u64)> = chosen
        .iter()
        .flat_map(|&i| (0..cfg.seeds_per_start).map(move |s| (i, derive_seed(cfg.seed, &[i as u64, s as u64]))))
        .collect();
    let cap = step_cap(spec);
    let b = Backends { policy, value, agg };
    let before = ops.stats();
    let runs = with_pool(cfg.parallel, || {
        tasks
            .par_iter()
            .map(|&(i, seed)| run_episode(i, &starts[i], seed, cap, cfg, ops, &b))
            .collect::<Vec<_>>()
    })?
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let delta = ops.stats().since(&before);

    let mut trace = TraceLog::new();
    let mut tally = Tally::default();
    let (mut decisions, mut fallbacks) = (0, 0);
    let mut episodes = Vec::with_capacity(runs.len());
    let mut trajectories = Vec::with_capacity(runs.len());
    for r in runs {
        trace.append(r.trace);
        let outcome = if r.summary.success {
            Some(Outcome::Success)
        } else {
            Some(Outcome::Fail)
        };
        tally.record(outcome, Player::Agent, r.summary.episode_return);
        decisions += r.decisions;
        fallbacks += r.fallbacks;
        episodes.push(r.summary);
        trajectories.push(r.trajectory);
    }
    let (mean_return, std_return) = mean_std(&tally.returns);
    let steps: Vec<f64> = episodes.iter().map(|e| e.steps as f64).collect();
    let mut metrics = IterationMetrics::empty(0);
    metrics.set_results(&tally);
    metrics.parse_failure_rate = ratio(delta.parse_failures, delta.calls);
    metrics.fallback_rate = ratio(fallbacks, decisions);
    metrics.failed_states = episodes.iter().filter(|e| e.error.is_some()).count();
    Ok(GpiReport {
        mean_return,
        std_return,
        mean_steps: mean_std(&steps).0,
        episodes,
        metrics,
        trajectories,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variations: usize,
    pub lookahead_steps: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub success_rate: f64,
}

/// Runs every (K, N) combination with otherwise identical settings.
pub fn run_gpi_ablation(
    spec: &EnvSpec,
    base: &GpiConfig,
    ks: &[usize],
    ns: &[usize],
    ops: &ValueOps,
    policy: &dyn Backend,
    value: &dyn Backend,
    agg: &dyn Backend,
) -> Result<Vec<AblationRow>, PipelineError> {
    let mut rows = Vec::new();
    for &n in ns {
        for &k in ks {
            let cfg = GpiConfig {
                variations: k,
                lookahead_steps: n,
                ..base.clone()
            };
            let r = run_language_gpi(spec, &cfg, ops, policy, value, agg)?;
            rows.push(AblationRow {
                variations: k,
                lookahead_steps: n,
                mean_return: r.mean_return,
                std_return: r.std_return,
                success_rate: r.metrics.win_rate,
            });
        }
    }
    Ok(rows)
}

/// Markdown table with one row per configuration and `mean±std` returns.
pub fn format_ablation_table(rows: &[AblationRow], column: &str) -> String {
    let mut out = format!("| Method | {column} |\n|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| GPI (K={} variations, N={} look-ahead steps) | {:.2}±{:.2} |\n",
            r.variations, r.lookahead_steps, r.mean_return, r.std_return
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::maze::MazeLayout;
    use crate::lm_backend::{OracleBackend, OracleOptions, ValueMode};
    use crate::pipelines::trace::validate_trace;
    use crate::prompt_kit::TemplateRegistry;

    fn oracle(opts: OracleOptions) -> OracleBackend {
        OracleBackend::new(
            EnvKind::Maze,
            OracleOptions {
                maze_layout: Some("toy".into()),
                ..opts
            },
        )
        .unwrap()
    }

    fn cfg(k: usize, n: usize) -> GpiConfig {
        GpiConfig {
            variations: k,
            lookahead_steps: n,
            eval_starts: 0,
            seeds_per_start: 1,
            parallel: 4,
            ..GpiConfig::default()
        }
    }

    #[test]
    fn toy_maze_shortest_paths() {
        let spec = EnvSpec::maze("toy").unwrap();
        let o = oracle(OracleOptions::default());
        let ops = ValueOps::new(TemplateRegistry::builtin());
        let r = run_language_gpi(&spec, &cfg(1, 1), &ops, &o, &o, &o).unwrap();
        let layout = MazeLayout::load("toy").unwrap();
        let starts = spec.start_states().unwrap();
        for e in &r.episodes {
            let State::Maze(m) = &starts[e.start] else {
                unreachable!()
            };
            let d = layout.distance(m.agent).unwrap() as usize;
            assert!(e.success, "{e:?}");
            assert!(e.steps <= d + 2, "{e:?} shortest {d}");
        }
        validate_trace(
            &r.trace.events,
            &[
                Phase::Rollout,
                Phase::Evaluate,
                Phase::Aggregate,
                Phase::Improve,
                Phase::Emit,
            ],
        )
        .unwrap();
    }

    #[test]
    fn flat_values_pick_lowest_id() {
        let spec = EnvSpec::maze("toy").unwrap();
        let flat = oracle(OracleOptions {
            value: ValueMode::Constant(-3.0),
            ..OracleOptions::default()
        });
        let ops = ValueOps::new(TemplateRegistry::builtin());
        let mut c = cfg(1, 1);
        c.eval_starts = 2;
        let r = run_language_gpi(&spec, &c, &ops, &flat, &flat, &flat).unwrap();
        for t in &r.trajectories {
            assert!(t.transitions.iter().all(|s| s.action.id == 1));
        }
        let again = run_language_gpi(&spec, &c, &ops, &flat, &flat, &flat).unwrap();
        assert_eq!(r.trace, again.trace);
    }

    #[test]
    fn table_rows() {
        let rows = [AblationRow {
            variations: 8,
            lookahead_steps: 3,
            mean_return: -11.186,
            std_return: 2.861,
            success_rate: 1.0,
        }];
        let t = format_ablation_table(&rows, "Toy Maze");
        assert!(
            t.contains("| GPI (K=8 variations, N=3 look-ahead steps) | -11.19±2.86 |"),
            "{t}"
        );
    }

    #[test]
    fn rejects_other_envs() {
        let o = OracleBackend::new(EnvKind::TicTacToe, OracleOptions::default()).unwrap();
        let ops = ValueOps::new(TemplateRegistry::builtin());
        assert!(run_language_gpi(&EnvSpec::TicTacToe, &cfg(1, 1), &ops, &o, &o, &o).is_err());
    }
}
