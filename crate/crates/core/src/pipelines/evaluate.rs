//! Evaluation of a language policy by play and of a language value function
//! against Monte-Carlo advantage labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env_core::{derive_seed, Player, State};
use crate::environments::{EnvSpec, OpponentKind};
use crate::lm_backend::Backend;
use crate::oracles::winrate::{AdvantageLabel, AdvantageSide};
use crate::prompt_kit::Verdict;
use crate::value_ops::{ValueOps, ValueOpsError};

use super::sampling::play_episode;
use super::{agent_return, ratio, with_pool, IterationMetrics, PipelineError, Tally};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_games: usize,
    pub agent: Player,
    /// Swap the agent's seat every other game.
    pub alternate_sides: bool,
    pub opponent: OpponentKind,
    pub seed: u64,
    pub parallel: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_games: 1000,
            agent: Player::O,
            alternate_sides: false,
            opponent: OpponentKind::UniformRandom,
            seed: 0,
            parallel: 8,
        }
    }
}

/// Plays `n_games` from the initial state. Unusable policy replies are
/// replaced by uniform random moves and reported as the parse-failure rate.
pub fn evaluate_policy(
    spec: &EnvSpec,
    policy: &dyn Backend,
    ops: &ValueOps,
    cfg: &EvalConfig,
    iteration: u32,
) -> Result<IterationMetrics, PipelineError> {
    if cfg.n_games == 0 {
        return Err(PipelineError::Config("n_games must be positive".into()));
    }
    let kind = spec.kind();
    let start = spec.initial_state()?;
    let episodes = with_pool(cfg.parallel, || {
        (0..cfg.n_games)
            .into_par_iter()
            .map(|g| {
                let agent = if !kind.is_two_player() {
                    Player::Agent
                } else if cfg.alternate_sides && g % 2 == 1 {
                    cfg.agent.opponent()
                } else {
                    cfg.agent
                };
                play_episode(
                    &start,
                    agent,
                    policy,
                    ops,
                    &cfg.opponent,
                    derive_seed(cfg.seed, &[g as u64]),
                )
            })
            .collect::<Result<Vec<_>, _>>()
    })??;
    let mut tally = Tally::default();
    let (mut failures, mut moves) = (0, 0);
    for e in &episodes {
        tally.record(e.trajectory.outcome(), e.agent, agent_return(&e.trajectory, e.agent));
        failures += e.parse_failures;
        moves += e.agent_moves;
    }
    let mut m = IterationMetrics::empty(iteration);
    m.set_results(&tally);
    m.parse_failure_rate = ratio(failures as u64, moves as u64);
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub correct: usize,
    pub evaluated: usize,
    /// Replies no parser accepted; they count as wrong.
    pub unparseable: usize,
    /// Labels without a side, left out.
    pub excluded: usize,
}

fn side_of(v: &Verdict) -> Option<AdvantageSide> {
    match v {
        Verdict::Side(s) => Some(*s),
        Verdict::Scalar(x) if *x > 0.0 => Some(AdvantageSide::White),
        Verdict::Scalar(x) if *x < 0.0 => Some(AdvantageSide::Black),
        _ => None,
    }
}

/// Fraction of labelled states whose queried evaluation names the labelled side.
pub fn evaluate_value_accuracy(
    states: &[State],
    labels: &[AdvantageLabel],
    value: &dyn Backend,
    ops: &ValueOps,
    parallel: usize,
) -> Result<AccuracyReport, PipelineError> {
    if states.len() != labels.len() {
        return Err(PipelineError::Config(format!(
            "{} states for {} labels",
            states.len(),
            labels.len()
        )));
    }
    if let Some((s, l)) = states.iter().zip(labels).find(|(s, l)| s.text() != l.state_text) {
        return Err(PipelineError::Config(format!(
            "label does not match state:\n{}\n{}",
            l.state_text,
            s.text()
        )));
    }
    let kept: Vec<(&State, AdvantageSide)> = states
        .iter()
        .zip(labels)
        .filter(|(_, l)| l.side != AdvantageSide::None)
        .map(|(s, l)| (s, l.side))
        .collect();
    let answers = with_pool(parallel, || {
        kept.par_iter()
            .map(|(s, _)| match ops.query_value(s, None, value) {
                Ok(est) => Ok(side_of(&est.verdict)),
                Err(ValueOpsError::Parse { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>, _>>()
    })??;
    let correct = kept
        .iter()
        .zip(&answers)
        .filter(|((_, side), a)| **a == Some(*side))
        .count();
    let unparseable = answers.iter().filter(|a| a.is_none()).count();
    Ok(AccuracyReport {
        accuracy: ratio(correct as u64, kept.len() as u64),
        correct,
        evaluated: kept.len(),
        unparseable,
        excluded: labels.len() - kept.len(),
    })
}
