//! Runnable training-data pipelines: look-ahead policy iteration, language TD
//! value training and actor-critic, plus evaluators and checkpoints.

pub mod actor_critic;
pub mod checkpoint;
pub mod evaluate;
pub mod gpi;
pub mod sampling;
pub mod schema;
pub mod td;
pub mod trace;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::env_core::{AgentAction, EnvError, EnvKind, Outcome, Player};
use crate::lm_backend::{turns_digest, BackendError, ChatTurn};
use crate::oracles::OracleError;
use crate::prompt_kit::PromptError;
use crate::value_ops::ValueOpsError;

pub use self::actor_critic::{
    merge_value_buffers, run_actor_critic_iteration, AcBackends, AcConfig, AcOutput, PolicyRecord, ValueQueryMode,
};
pub use self::checkpoint::{IterationArtifacts, CHECKPOINT_FILES};
pub use self::evaluate::{evaluate_policy, evaluate_value_accuracy, AccuracyReport, EvalConfig};
pub use self::gpi::{
    format_ablation_table, run_gpi_ablation, run_language_gpi, AblationRow, GpiConfig, GpiReport, RolloutPolicy,
};
pub use self::sampling::{select_action_candidates, ActionMask};
pub use self::schema::{validate_sft_file, validate_sft_text, SchemaReport, Violation};
pub use self::td::{
    build_state_dataset, build_td_buffer, generate_td_training_set, Distinctness, StateDataset, TdBuffer, TdEntry,
    TdOutput,
};
pub use self::trace::{validate_trace, Phase, TraceEvent, TraceLog};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ops(#[from] ValueOpsError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{failed} of {total} states failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("{0}")]
    Io(String),
    #[error("malformed trace: {0}")]
    Trace(String),
}

impl PipelineError {
    /// Errors that mean the run cannot continue, as opposed to one bad state or episode.
    pub fn is_fatal(&self) -> bool {
        match self {
            PipelineError::Ops(ValueOpsError::Backend(b)) | PipelineError::Backend(b) => {
                matches!(b, BackendError::Config(_) | BackendError::Io(_))
            }
            PipelineError::Ops(ValueOpsError::Prompt(_) | ValueOpsError::Unsupported(_)) => true,
            PipelineError::Config(_) | PipelineError::Prompt(_) | PipelineError::Io(_) => true,
            PipelineError::TooManyFailures { .. } => true,
            _ => false,
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Gpi,
    TdTrain,
    ActorCritic,
    Evaluate,
}

impl PipelineKind {
    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::Gpi => "gpi",
            PipelineKind::TdTrain => "td_train",
            PipelineKind::ActorCritic => "actor_critic",
            PipelineKind::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineKind {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "gpi" => Ok(PipelineKind::Gpi),
            "td_train" => Ok(PipelineKind::TdTrain),
            "actor_critic" => Ok(PipelineKind::ActorCritic),
            "evaluate" => Ok(PipelineKind::Evaluate),
            other => Err(PipelineError::Config(format!("unknown pipeline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftTags {
    pub iteration: u32,
    pub pipeline: PipelineKind,
    pub env: EnvKind,
}

/// One supervised example: prompt turns and the completion to learn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub messages: Vec<ChatTurn>,
    pub target: String,
    pub tags: SftTags,
}

impl SftExample {
    pub fn new(messages: Vec<ChatTurn>, target: impl Into<String>, tags: SftTags) -> Result<Self, PipelineError> {
        let target = target.into();
        if target.trim().is_empty() {
            return Err(PipelineError::Config("empty SFT target".into()));
        }
        if messages.is_empty() {
            return Err(PipelineError::Config("SFT example without messages".into()));
        }
        Ok(SftExample { messages, target, tags })
    }

    /// Prompt identity; for value sets this is the evaluated state or pair.
    pub fn key(&self) -> String {
        turns_digest(&self.messages)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub examples: Vec<SftExample>,
}

impl TrainingSet {
    pub fn new(examples: Vec<SftExample>) -> Self {
        TrainingSet { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Keeps the last example per prompt, preserving the order of survivors.
    pub fn dedup_keep_last(examples: Vec<SftExample>) -> Self {
        let mut seen = HashSet::new();
        let mut kept: Vec<SftExample> = examples.into_iter().rev().filter(|e| seen.insert(e.key())).collect();
        kept.reverse();
        TrainingSet { examples: kept }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[ChatTurn], &str)> {
        self.examples.iter().map(|e| (e.messages.as_slice(), e.target.as_str()))
    }
}

/// Win/loss/tie counts and per-episode returns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tally {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub returns: Vec<f64>,
}

impl Tally {
    /// Single-agent success counts as a win, failure or timeout as a loss.
    pub fn record(&mut self, outcome: Option<Outcome>, agent: Player, ret: f64) {
        match outcome {
            Some(Outcome::Win(p)) if p == agent => self.wins += 1,
            Some(Outcome::Win(_)) => self.losses += 1,
            Some(Outcome::Success) => self.wins += 1,
            Some(Outcome::Draw) => self.ties += 1,
            Some(Outcome::Fail) | None => self.losses += 1,
        }
        self.returns.push(ret);
    }

    pub fn games(&self) -> usize {
        self.wins + self.losses + self.ties
    }

    fn rate(&self, n: usize) -> f64 {
        if self.games() == 0 {
            0.0
        } else {
            n as f64 / self.games() as f64
        }
    }

    pub fn mean_return(&self) -> f64 {
        mean_std(&self.returns).0
    }
}

/// Mean and population standard deviation; zeros for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u32,
    pub win_rate: f64,
    pub loss_rate: f64,
    pub tie_rate: f64,
    pub avg_return: f64,
    pub return_std: f64,
    pub accuracy: Option<f64>,
    pub parse_failure_rate: f64,
    pub fallback_rate: f64,
    pub episodes: usize,
    pub value_examples: usize,
    pub policy_examples: usize,
    pub failed_states: usize,
}

impl IterationMetrics {
    pub fn empty(iteration: u32) -> Self {
        IterationMetrics {
            iteration,
            win_rate: 0.0,
            loss_rate: 0.0,
            tie_rate: 0.0,
            avg_return: 0.0,
            return_std: 0.0,
            accuracy: None,
            parse_failure_rate: 0.0,
            fallback_rate: 0.0,
            episodes: 0,
            value_examples: 0,
            policy_examples: 0,
            failed_states: 0,
        }
    }

    /// Overwrites the game-result fields from `t`.
    pub fn set_results(&mut self, t: &Tally) {
        self.win_rate = t.rate(t.wins);
        self.loss_rate = t.rate(t.losses);
        self.tie_rate = t.rate(t.ties);
        let (m, s) = mean_std(&t.returns);
        self.avg_return = m;
        self.return_std = s;
        self.episodes = t.games();
    }
}

/// Episode return from `agent`'s side: ±1 or 0 for games, summed reward otherwise.
pub fn agent_return(traj: &crate::env_core::Trajectory, agent: Player) -> f64 {
    match traj.outcome() {
        Some(Outcome::Win(p)) if p == agent => 1.0,
        Some(Outcome::Win(_)) => -1.0,
        Some(Outcome::Draw) => 0.0,
        _ => traj.transitions.iter().map(|t| t.reward).sum(),
    }
}

pub(crate) fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Completion a tuned policy should produce for choosing `action`.
pub fn policy_target(kind: EnvKind, rationale: &str, action: &AgentAction) -> String {
    let thought = if rationale.trim().is_empty() {
        "This move has the best evaluation among the candidates."
    } else {
        rationale
    };
    match kind {
        EnvKind::Maze => json!({ "thought": thought, "action": action.display }).to_string(),
        _ => json!({ "thought": thought, "best_move": action.id }).to_string(),
    }
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub(crate) fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm_backend::ChatTurn;

    fn ex(prompt: &str, target: &str, it: u32) -> SftExample {
        SftExample::new(
            vec![ChatTurn::user(prompt)],
            target,
            SftTags {
                iteration: it,
                pipeline: PipelineKind::ActorCritic,
                env: EnvKind::TicTacToe,
            },
        )
        .unwrap()
    }

    #[test]
    fn sft_record_shape() {
        let v = serde_json::to_value(ex("p", "t", 2)).unwrap();
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["target"], "t");
        assert_eq!(v["tags"]["iteration"], 2);
        assert_eq!(v["tags"]["pipeline"], "actor_critic");
        assert_eq!(v["tags"]["env"], "tictactoe");
    }

    #[test]
    fn empty_target_rejected() {
        let tags = ex("p", "t", 0).tags;
        assert!(SftExample::new(vec![ChatTurn::user("p")], "  ", tags).is_err());
    }

    #[test]
    fn dedup_keeps_newest() {
        let set = TrainingSet::dedup_keep_last(vec![ex("a", "old", 0), ex("b", "b", 0), ex("a", "new", 1)]);
        let targets: Vec<&str> = set.examples.iter().map(|e| e.target.as_str()).collect();
        assert_eq!(targets, ["b", "new"]);
    }

    #[test]
    fn tally_rates_sum_to_one() {
        let mut t = Tally::default();
        t.record(Some(Outcome::Win(Player::O)), Player::O, 1.0);
        t.record(Some(Outcome::Win(Player::X)), Player::O, -1.0);
        t.record(Some(Outcome::Draw), Player::O, 0.0);
        t.record(None, Player::O, 0.0);
        let mut m = IterationMetrics::empty(0);
        m.set_results(&t);
        assert_eq!(m.win_rate, 0.25);
        assert_eq!(m.loss_rate, 0.5);
        assert!((m.win_rate + m.loss_rate + m.tie_rate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }

    #[test]
    fn pipeline_names_round_trip() {
        for p in [
            PipelineKind::Gpi,
            PipelineKind::TdTrain,
            PipelineKind::ActorCritic,
            PipelineKind::Evaluate,
        ] {
            assert_eq!(p.name().parse::<PipelineKind>().unwrap(), p);
        }
    }
}
