//! One actor-critic iteration: collect episodes, build Monte-Carlo value
//! targets, merge recent value sets, and derive improved policy targets
//! restricted to frequently sampled actions.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env_core::{derive_seed, rng_from, AgentAction, EnvKind, Player, State, Trajectory};
use crate::environments::{EnvSpec, OpponentKind};
use crate::lm_backend::tuned::SftLookupBackend;
use crate::lm_backend::Backend;
use crate::value_ops::{
    deterministic_successor, prompts, CandidateEvaluationSet, LanguageValueEstimate, ValueOps, ValueOpsError,
};

use super::sampling::{play_episode, select_action_candidates, ActionMask, Episode};
use super::trace::{Phase, TraceLog};
use super::{
    agent_return, policy_target, ratio, with_pool, IterationMetrics, PipelineError, PipelineKind, SftExample, SftTags,
    Tally, TrainingSet,
};

/// What the value model is asked about when scoring a candidate action.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueQueryMode {
    /// The (state, action) pair.
    #[default]
    StateAction,
    /// The state the action leads to; deterministic environments only.
    Successor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcConfig {
    pub trajectories: usize,
    pub k_mc: usize,
    pub n_sample: usize,
    pub m: usize,
    pub k_buffer: usize,
    pub value_query: ValueQueryMode,
    pub agent: Player,
    /// Swap the agent's seat every other episode.
    pub alternate_sides: bool,
    pub opponent: OpponentKind,
    pub seed: u64,
    pub parallel: usize,
}

impl Default for AcConfig {
    fn default() -> Self {
        AcConfig {
            trajectories: 512,
            k_mc: 5,
            n_sample: 10,
            m: 10,
            k_buffer: 3,
            value_query: ValueQueryMode::StateAction,
            agent: Player::O,
            alternate_sides: false,
            opponent: OpponentKind::UniformRandom,
            seed: 0,
            parallel: 64,
        }
    }
}

impl AcConfig {
    pub fn validate(&self, kind: EnvKind) -> Result<(), PipelineError> {
        let counts = [
            self.trajectories,
            self.k_mc,
            self.n_sample,
            self.m,
            self.k_buffer,
            self.parallel,
        ];
        if counts.contains(&0) {
            return Err(PipelineError::Config("actor-critic counts must be positive".into()));
        }
        if !matches!(kind, EnvKind::TicTacToe | EnvKind::FrozenLake) {
            return Err(PipelineError::Config(format!(
                "actor-critic is not available for {kind}"
            )));
        }
        if kind == EnvKind::FrozenLake && self.value_query == ValueQueryMode::Successor {
            return Err(PipelineError::Config(
                "successor value queries need a deterministic environment".into(),
            ));
        }
        Ok(())
    }

    fn agent_for(&self, episode: usize, kind: EnvKind) -> Player {
        if !kind.is_two_player() {
            Player::Agent
        } else if self.alternate_sides && episode % 2 == 1 {
            self.agent.opponent()
        } else {
            self.agent
        }
    }
}

pub struct AcBackends<'a> {
    pub policy: &'a dyn Backend,
    /// Summarises rollouts into Monte-Carlo estimates.
    pub evaluator: &'a dyn Backend,
    /// Scores candidate actions before improvement.
    pub value: &'a dyn Backend,
    pub improver: &'a dyn Backend,
    /// When set, absorbs the merged value set before candidates are scored.
    pub value_tuner: Option<&'a SftLookupBackend>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRecord {
    pub state: State,
    pub mask: ActionMask,
    pub action: AgentAction,
    pub fallback_used: bool,
    pub example: SftExample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcOutput {
    /// Value examples built this iteration.
    pub value_set: TrainingSet,
    /// This iteration's set merged with the preceding ones.
    pub merged: TrainingSet,
    pub policy_set: TrainingSet,
    pub policy_records: Vec<PolicyRecord>,
    pub trajectories: Vec<Trajectory>,
    pub metrics: IterationMetrics,
    pub trace: TraceLog,
}

/// The last `k_buffer` sets concatenated; a repeated prompt keeps its newest target.
pub fn merge_value_buffers(history: &[TrainingSet], k_buffer: usize) -> Result<TrainingSet, PipelineError> {
    if history.is_empty() || k_buffer == 0 {
        return Err(PipelineError::Config(
            "merging needs at least one set and K_buffer >= 1".into(),
        ));
    }
    let start = history.len().saturating_sub(k_buffer);
    Ok(TrainingSet::dedup_keep_last(
        history[start..]
            .iter()
            .flat_map(|s| s.examples.iter().cloned())
            .collect(),
    ))
}

/// Prompt the value model sees for (state, action) under `mode`.
pub fn value_prompt(
    ops: &ValueOps,
    state: &State,
    action: &AgentAction,
    mode: ValueQueryMode,
) -> Result<prompts::Prompt, ValueOpsError> {
    match mode {
        ValueQueryMode::StateAction => prompts::value_query_prompt(&ops.registry, state, Some(action)),
        ValueQueryMode::Successor => {
            let next = deterministic_successor(state, action)?;
            prompts::value_query_prompt(&ops.registry, &next, None)
        }
    }
}

fn query(
    ops: &ValueOps,
    state: &State,
    action: &AgentAction,
    mode: ValueQueryMode,
    backend: &dyn Backend,
) -> Result<LanguageValueEstimate, ValueOpsError> {
    match mode {
        ValueQueryMode::StateAction => ops.query_value(state, Some(action), backend),
        ValueQueryMode::Successor => ops.query_value(&deterministic_successor(state, action)?, None, backend),
    }
}

/// `action` at `state`, then play on with the current policy until the end.
fn continuation(
    state: &State,
    action: &AgentAction,
    cfg: &AcConfig,
    ops: &ValueOps,
    policy: &dyn Backend,
    seed: u64,
) -> Result<Trajectory, PipelineError> {
    let agent = state.mover();
    let first = state.apply(action, &mut rng_from(seed))?;
    let mut traj = Trajectory::new(seed);
    let next = first.state_after.clone();
    traj.transitions.push(first);
    if !next.is_terminal() {
        let rest = play_episode(&next, agent, policy, ops, &cfg.opponent, derive_seed(seed, &[1]))?;
        traj.transitions.extend(rest.trajectory.transitions);
    }
    Ok(traj)
}

fn check_failures(failed: usize, total: usize) -> Result<(), PipelineError> {
    if failed * 2 > total {
        Err(PipelineError::TooManyFailures { failed, total })
    } else {
        Ok(())
    }
}

fn sort_out<T>(results: Vec<Result<T, PipelineError>>) -> Result<(Vec<T>, usize), PipelineError> {
    let mut ok = Vec::with_capacity(results.len());
    let mut failed = 0;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) if e.is_fatal() => return Err(e),
            Err(_) => failed += 1,
        }
    }
    Ok((ok, failed))
}

/// Runs one iteration. `history` holds the value sets of earlier
/// iterations, oldest first.
pub fn run_actor_critic_iteration(
    spec: &EnvSpec,
    cfg: &AcConfig,
    ops: &ValueOps,
    b: &AcBackends,
    history: &[TrainingSet],
    iteration: u32,
) -> Result<AcOutput, PipelineError> {
    let kind = spec.kind();
    cfg.validate(kind)?;
    let start = spec.initial_state()?;
    let it = u64::from(iteration);
    let tags = |pipeline| SftTags {
        iteration,
        pipeline,
        env: kind,
    };
    let before = ops.stats();
    let mut trace = TraceLog::new();

    // Collect episodes with the current policy.
    let episodes: Vec<Episode> = with_pool(cfg.parallel, || {
        (0..cfg.trajectories)
            .into_par_iter()
            .map(|g| {
                let seed = derive_seed(cfg.seed, &[it, 0, g as u64]);
                play_episode(&start, cfg.agent_for(g, kind), b.policy, ops, &cfg.opponent, seed)
            })
            .collect::<Result<Vec<_>, _>>()
    })??;
    trace.push(0, Phase::Rollout, "collect_episodes", episodes.len());
    let mut tally = Tally::default();
    let mut pairs: Vec<(State, AgentAction)> = Vec::new();
    let mut seen_pairs = HashSet::new();
    let mut states: Vec<State> = Vec::new();
    let mut seen_states = HashSet::new();
    for e in &episodes {
        tally.record(e.trajectory.outcome(), e.agent, agent_return(&e.trajectory, e.agent));
        for t in &e.trajectory.transitions {
            if kind.is_two_player() && t.mover() != e.agent {
                continue;
            }
            let text = t.state_before.text();
            if seen_pairs.insert((text.clone(), t.action.id)) {
                pairs.push((t.state_before.clone(), t.action.clone()));
            }
            if seen_states.insert(text) {
                states.push(t.state_before.clone());
            }
        }
    }

    // Monte-Carlo value targets for every visited pair.
    let value_results = with_pool(cfg.parallel, || {
        pairs
            .par_iter()
            .enumerate()
            .map(|(i, (s, a))| {
                let rollouts = (0..cfg.k_mc)
                    .map(|j| {
                        continuation(
                            s,
                            a,
                            cfg,
                            ops,
                            b.policy,
                            derive_seed(cfg.seed, &[it, 1, i as u64, j as u64]),
                        )
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let est = ops.language_mc_estimate(s, a, &rollouts, b.evaluator)?;
                let prompt = value_prompt(ops, s, a, cfg.value_query)?;
                SftExample::new(prompt.turns, est.narrative, tags(PipelineKind::ActorCritic))
            })
            .collect::<Vec<_>>()
    })?;
    let (value_examples, failed_pairs) = sort_out(value_results)?;
    check_failures(failed_pairs, pairs.len())?;
    trace.push(0, Phase::Evaluate, "mc_estimates", value_examples.len());
    let value_set = TrainingSet::dedup_keep_last(value_examples);

    let mut all = history.to_vec();
    all.push(value_set.clone());
    let merged = merge_value_buffers(&all, cfg.k_buffer)?;
    if let Some(tuner) = b.value_tuner {
        tuner.absorb(merged.pairs());
    }
    trace.push(0, Phase::Aggregate, "merge_value_buffers", merged.len());

    // Improved targets over masked candidates.
    let policy_results = with_pool(cfg.parallel, || {
        states
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mask = select_action_candidates(
                    s,
                    b.policy,
                    ops,
                    cfg.n_sample,
                    cfg.m,
                    derive_seed(cfg.seed, &[it, 2, i as u64]),
                )?;
                let entries = mask
                    .kept_actions()
                    .into_iter()
                    .map(|a| Ok((a.clone(), query(ops, s, &a, cfg.value_query, b.value)?)))
                    .collect::<Result<Vec<_>, ValueOpsError>>()?;
                let cands = CandidateEvaluationSet::new(s.clone(), entries)?;
                let imp = ops.improve_policy(&cands, b.improver)?;
                let prompt = prompts::policy_prompt(&ops.registry, s)?;
                let example = SftExample::new(
                    prompt.turns,
                    policy_target(kind, &imp.rationale, &imp.action),
                    tags(PipelineKind::ActorCritic),
                )?;
                Ok(PolicyRecord {
                    state: s.clone(),
                    mask,
                    action: imp.action,
                    fallback_used: imp.fallback_used,
                    example,
                })
            })
            .collect::<Vec<_>>()
    })?;
    let (policy_records, failed_states) = sort_out(policy_results)?;
    check_failures(failed_states, states.len())?;
    trace.push(0, Phase::Improve, "improve_policy", policy_records.len());
    let policy_set = TrainingSet::new(policy_records.iter().map(|r| r.example.clone()).collect());
    trace.push(0, Phase::Emit, "value_sft", merged.len());
    trace.push(0, Phase::Emit, "policy_sft", policy_set.len());

    let delta = ops.stats().since(&before);
    let mut metrics = IterationMetrics::empty(iteration);
    metrics.set_results(&tally);
    metrics.parse_failure_rate = ratio(delta.parse_failures, delta.calls);
    let fallbacks = policy_records.iter().filter(|r| r.fallback_used).count();
    metrics.fallback_rate = ratio(fallbacks as u64, policy_records.len() as u64);
    metrics.value_examples = merged.len();
    metrics.policy_examples = policy_set.len();
    metrics.failed_states = failed_pairs + failed_states;
    Ok(AcOutput {
        value_set,
        merged,
        policy_set,
        policy_records,
        trajectories: episodes.into_iter().map(|e| e.trajectory).collect(),
        metrics,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm_backend::ChatTurn;

    fn set(it: u32, prompts: &[&str]) -> TrainingSet {
        TrainingSet::new(
            prompts
                .iter()
                .map(|p| {
                    SftExample::new(
                        vec![ChatTurn::user(*p)],
                        format!("{p}@{it}"),
                        SftTags {
                            iteration: it,
                            pipeline: PipelineKind::ActorCritic,
                            env: EnvKind::TicTacToe,
                        },
                    )
                    .unwrap()
                })
                .collect(),
        )
    }

    #[test]
    fn merge_window() {
        let history: Vec<TrainingSet> = (1..=5).map(|i| set(i, &[&format!("p{i}")])).collect();
        let merged = merge_value_buffers(&history, 3).unwrap();
        let its: Vec<u32> = merged.examples.iter().map(|e| e.tags.iteration).collect();
        assert_eq!(its, [3, 4, 5]);
        assert_eq!(merge_value_buffers(&history, 1).unwrap(), history[4]);
        assert!(merge_value_buffers(&[], 3).is_err());
    }

    #[test]
    fn merge_newest_wins() {
        let merged = merge_value_buffers(&[set(1, &["a", "b"]), set(2, &["a"])], 3).unwrap();
        let targets: Vec<&str> = merged.examples.iter().map(|e| e.target.as_str()).collect();
        assert_eq!(targets, ["b@1", "a@2"]);
    }

    #[test]
    fn config_checks() {
        let cfg = AcConfig::default();
        cfg.validate(EnvKind::TicTacToe).unwrap();
        assert!(cfg.validate(EnvKind::Maze).is_err());
        let succ = AcConfig {
            value_query: ValueQueryMode::Successor,
            ..AcConfig::default()
        };
        assert!(succ.validate(EnvKind::FrozenLake).is_err());
        assert!(AcConfig {
            k_mc: 0,
            ..AcConfig::default()
        }
        .validate(EnvKind::TicTacToe)
        .is_err());
    }
}
