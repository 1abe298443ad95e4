//! Language value operators: Monte-Carlo and look-ahead aggregation,
//! direct value queries and the policy-improvement step.

pub mod prompts;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::env_core::{rng_from, AgentAction, EnvError, EnvKind, Player, State};
use crate::lm_backend::{Backend, BackendError, ChatTurn, CompletionRequest, SamplingParams};
use crate::oracles::winrate::AdvantageSide;
use crate::prompt_kit::{
    parse_advantage, parse_maze_evaluation, parse_policy_reply, parse_value_reply, ParseError, PromptError,
    TemplateRegistry, ValueScale, Verdict,
};
use crate::util::sha256_hex;

pub use self::prompts::Prompt;

#[derive(Debug, Error)]
pub enum ValueOpsError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("reply unusable after {attempts} attempts: {last}")]
    Parse { attempts: u32, last: ParseError },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("not supported: {0}")]
    Unsupported(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    Mc,
    Td,
    DirectQuery,
    /// Written by rule for a finished episode; no model call.
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageValueEstimate {
    /// The full reply text.
    pub narrative: String,
    pub verdict: Verdict,
    pub source: ValueSource,
    /// Digest of the producing request, or `rule:<hash>` for terminal estimates.
    pub provenance: String,
}

impl LanguageValueEstimate {
    /// Verdict as a number from `mover`'s side; higher is better for the mover.
    pub fn score_for(&self, mover: Player) -> f64 {
        match (&self.verdict, mover) {
            (Verdict::Scalar(v), Player::X) => -v,
            (Verdict::Scalar(v), _) => *v,
            (Verdict::Side(s), p) => {
                let white = matches!(s, AdvantageSide::White);
                let black = matches!(s, AdvantageSide::Black);
                match p {
                    Player::White if white => 1.0,
                    Player::Black if black => 1.0,
                    Player::White | Player::Black if white || black => -1.0,
                    _ => 0.0,
                }
            }
            (Verdict::Narrative, _) => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationPacket {
    /// Narration of the move sequence.
    pub move_description: String,
    /// Text of the state the variation ends in.
    pub successor_text: String,
    pub successor_evaluation: LanguageValueEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEvaluationSet {
    pub state: State,
    pub entries: Vec<(AgentAction, LanguageValueEstimate)>,
}

impl CandidateEvaluationSet {
    /// Checks the candidates are non-empty, distinct and legal at `state`.
    pub fn new(state: State, entries: Vec<(AgentAction, LanguageValueEstimate)>) -> Result<Self, ValueOpsError> {
        if entries.is_empty() {
            return Err(ValueOpsError::Precondition("no candidates".into()));
        }
        let legal = state.legal_actions()?;
        for (i, (a, _)) in entries.iter().enumerate() {
            if !legal.iter().any(|l| l.id == a.id) {
                return Err(ValueOpsError::Precondition(format!(
                    "candidate {} is not legal",
                    a.display
                )));
            }
            if entries[..i].iter().any(|(b, _)| b.id == a.id) {
                return Err(ValueOpsError::Precondition(format!("candidate {} repeated", a.display)));
            }
        }
        Ok(CandidateEvaluationSet { state, entries })
    }

    pub fn actions(&self) -> Vec<AgentAction> {
        self.entries.iter().map(|(a, _)| a.clone()).collect()
    }

    /// Highest verdict from the mover's side; ties go to the lowest id.
    pub fn best_by_verdict(&self) -> &AgentAction {
        let mover = self.state.mover();
        let (a, _) = self
            .entries
            .iter()
            .max_by(|(a, x), (b, y)| x.score_for(mover).total_cmp(&y.score_for(mover)).then(b.id.cmp(&a.id)))
            .expect("non-empty by construction");
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub action: AgentAction,
    pub rationale: String,
    /// The reply was unusable and the best-verdict candidate was taken.
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDraw {
    pub action: Option<AgentAction>,
    pub reply: String,
}

#[derive(Debug, Default)]
pub struct OpsStats {
    calls: AtomicU64,
    parse_failures: AtomicU64,
    fallbacks: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub calls: u64,
    pub parse_failures: u64,
    pub fallbacks: u64,
}

impl StatsSnapshot {
    pub fn since(&self, earlier: &StatsSnapshot) -> StatsSnapshot {
        StatsSnapshot {
            calls: self.calls - earlier.calls,
            parse_failures: self.parse_failures - earlier.parse_failures,
            fallbacks: self.fallbacks - earlier.fallbacks,
        }
    }
}

/// Applies an action where the outcome does not depend on chance.
pub fn deterministic_successor(state: &State, action: &AgentAction) -> Result<State, ValueOpsError> {
    match state {
        State::FrozenLake(_) => Err(ValueOpsError::Unsupported(
            "FrozenLake transitions are stochastic".into(),
        )),
        _ => Ok(state.apply(action, &mut rng_from(0))?.state_after),
    }
}

/// Rule-written evaluation of a finished episode, at the edge of the scale.
pub fn terminal_estimate(state: &State) -> Option<LanguageValueEstimate> {
    let ending = state.ending_text()?;
    let (narrative, verdict) = match state {
        State::TicTacToe(b) => {
            let v = match b.winner() {
                Some((Player::O, _)) => 1.0,
                Some(_) => -1.0,
                None => 0.0,
            };
            (
                json!({"thought": ending, "final_evaluation": v}).to_string(),
                Verdict::Scalar(v),
            )
        }
        State::FrozenLake(g) => {
            let v = if g.on_goal() {
                5.0
            } else if g.in_hole() {
                -5.0
            } else {
                g.distance_to_goal().map_or(-5.0, |d| -0.1 * f64::from(d))
            };
            (
                json!({"thought": ending, "final_evaluation": v}).to_string(),
                Verdict::Scalar(v),
            )
        }
        State::Breakthrough(b) => {
            let side = match b.winner() {
                Some(Player::White) => AdvantageSide::White,
                Some(_) => AdvantageSide::Black,
                None => AdvantageSide::None,
            };
            (format!("{ending}\n*Advantage*: {}", side.tag()), Verdict::Side(side))
        }
        State::Maze(m) => {
            let v = if m.at_goal() {
                0.0
            } else {
                -f64::from(m.layout.distance(m.agent).unwrap_or(99))
            };
            (
                json!({"thoughts": ending, "final_evaluation": v}).to_string(),
                Verdict::Scalar(v),
            )
        }
    };
    Some(LanguageValueEstimate {
        narrative,
        verdict,
        source: ValueSource::Terminal,
        provenance: format!("rule:{}", &sha256_hex(state.text().as_bytes())[..16]),
    })
}

/// Reads the verdict a value reply carries, per environment.
pub fn parse_verdict(kind: EnvKind, scale: Option<ValueScale>, text: &str) -> Result<Verdict, ParseError> {
    match kind {
        EnvKind::TicTacToe | EnvKind::FrozenLake => {
            parse_value_reply(text, scale).map(|r| Verdict::Scalar(r.final_evaluation))
        }
        EnvKind::Breakthrough => parse_advantage(text).map(|r| Verdict::Side(r.side)),
        EnvKind::Maze => parse_maze_evaluation(text).map(|e| e.verdict),
    }
}

/// Operator context: template registry, sampling parameters and the number
/// of extra attempts allowed after an unusable reply.
#[derive(Debug)]
pub struct ValueOps {
    pub registry: Arc<TemplateRegistry>,
    pub params: SamplingParams,
    pub retry_budget: u32,
    stats: OpsStats,
}

struct Reply<T> {
    value: T,
    text: String,
    digest: String,
}

impl ValueOps {
    pub fn new(registry: Arc<TemplateRegistry>) -> Self {
        ValueOps {
            registry,
            params: SamplingParams::default(),
            retry_budget: 1,
            stats: OpsStats::default(),
        }
    }

    pub fn with_params(mut self, params: SamplingParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_retry_budget(mut self, n: u32) -> Self {
        self.retry_budget = n;
        self
    }

    pub fn stats(&self) -> StatsSnapshot {
        StatsSnapshot {
            calls: self.stats.calls.load(Ordering::Relaxed),
            parse_failures: self.stats.parse_failures.load(Ordering::Relaxed),
            fallbacks: self.stats.fallbacks.load(Ordering::Relaxed),
        }
    }

    /// Request for attempt `n`; retries vary the sampling seed so a cached or
    /// deterministic backend can answer differently.
    pub fn request(&self, turns: &[ChatTurn], attempt: u32) -> CompletionRequest {
        let params = if attempt == 0 {
            self.params.clone()
        } else {
            self.params
                .with_seed(self.params.seed.unwrap_or(0).wrapping_add(u64::from(attempt)))
        };
        CompletionRequest::new(turns.to_vec(), params)
    }

    fn call<T>(
        &self,
        backend: &dyn Backend,
        turns: &[ChatTurn],
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<Reply<T>, ValueOpsError> {
        let mut last = ParseError::ParseFailure("no attempt made".into());
        for attempt in 0..=self.retry_budget {
            let req = self.request(turns, attempt);
            self.stats.calls.fetch_add(1, Ordering::Relaxed);
            let res = backend.complete(&req)?;
            match parse(&res.text) {
                Ok(value) => {
                    return Ok(Reply {
                        value,
                        text: res.text,
                        digest: req.digest(),
                    })
                }
                Err(e) => {
                    self.stats.parse_failures.fetch_add(1, Ordering::Relaxed);
                    last = e;
                }
            }
        }
        Err(ValueOpsError::Parse {
            attempts: self.retry_budget + 1,
            last,
        })
    }

    fn estimate(
        &self,
        backend: &dyn Backend,
        kind: EnvKind,
        prompt: &Prompt,
        source: ValueSource,
    ) -> Result<LanguageValueEstimate, ValueOpsError> {
        let scale = self.registry.get(prompt.template)?.scale;
        let r = self.call(backend, &prompt.turns, |t| parse_verdict(kind, scale, t))?;
        Ok(LanguageValueEstimate {
            narrative: r.text,
            verdict: r.value,
            source,
            provenance: r.digest,
        })
    }

    /// Summarises complete rollouts that all start with (`state`, `action`).
    pub fn language_mc_estimate(
        &self,
        state: &State,
        action: &AgentAction,
        rollouts: &[crate::env_core::Trajectory],
        backend: &dyn Backend,
    ) -> Result<LanguageValueEstimate, ValueOpsError> {
        if rollouts.is_empty() {
            return Err(ValueOpsError::Precondition("at least one rollout required".into()));
        }
        for r in rollouts {
            let first = r.transitions.first();
            if first.is_none_or(|t| t.state_before != *state || t.action.id != action.id) {
                return Err(ValueOpsError::Precondition(
                    "rollout does not start with the evaluated pair".into(),
                ));
            }
        }
        let prompt = prompts::mc_prompt(&self.registry, state, action, rollouts)?;
        self.estimate(backend, state.kind(), &prompt, ValueSource::Mc)
    }

    /// Aggregates look-ahead variations into a new evaluation of `state`
    /// (maze: of taking `chosen` at `state`).
    pub fn language_td_target(
        &self,
        state: &State,
        chosen: Option<&AgentAction>,
        variations: &[VariationPacket],
        backend: &dyn Backend,
    ) -> Result<LanguageValueEstimate, ValueOpsError> {
        if variations.is_empty() {
            return Err(ValueOpsError::Precondition("at least one variation required".into()));
        }
        if variations.iter().any(|v| v.move_description.trim().is_empty()) {
            return Err(ValueOpsError::Precondition("empty move description".into()));
        }
        let prompt = prompts::td_prompt(&self.registry, state, chosen, variations)?;
        self.estimate(backend, state.kind(), &prompt, ValueSource::Td)
    }

    /// Evaluates `state`, or the pair (`state`, `action`). Finished episodes
    /// are scored by rule without a model call.
    pub fn query_value(
        &self,
        state: &State,
        action: Option<&AgentAction>,
        backend: &dyn Backend,
    ) -> Result<LanguageValueEstimate, ValueOpsError> {
        if let Some(est) = terminal_estimate(state) {
            return match action {
                None => Ok(est),
                Some(_) => Err(ValueOpsError::Env(EnvError::TerminalState)),
            };
        }
        if let Some(a) = action {
            if state.kind() != EnvKind::FrozenLake {
                let next = deterministic_successor(state, a)?;
                if let Some(est) = terminal_estimate(&next) {
                    return Ok(est);
                }
            }
        }
        let prompt = prompts::value_query_prompt(&self.registry, state, action)?;
        self.estimate(backend, state.kind(), &prompt, ValueSource::DirectQuery)
    }

    /// One policy reply for `state` under sampling seed `seed`, without retry.
    /// `action` is `None` when the reply names no legal move.
    pub fn policy_move(&self, state: &State, backend: &dyn Backend, seed: u64) -> Result<PolicyDraw, ValueOpsError> {
        let prompt = prompts::policy_prompt(&self.registry, state)?;
        let legal = state.legal_actions()?;
        let req = CompletionRequest::new(prompt.turns, self.params.with_seed(seed));
        self.stats.calls.fetch_add(1, Ordering::Relaxed);
        let res = backend.complete(&req)?;
        let action = match parse_policy_reply(&res.text, state.kind(), &legal) {
            Ok(r) => Some(r.best_move),
            Err(_) => {
                self.stats.parse_failures.fetch_add(1, Ordering::Relaxed);
                None
            }
        };
        Ok(PolicyDraw {
            action,
            reply: res.text,
        })
    }

    /// Asks the improver to choose among evaluated candidates. An unusable
    /// reply is retried, then the best-verdict candidate is taken.
    pub fn improve_policy(
        &self,
        cands: &CandidateEvaluationSet,
        backend: &dyn Backend,
    ) -> Result<Improvement, ValueOpsError> {
        let prompt = prompts::improvement_prompt(&self.registry, cands)?;
        let actions = cands.actions();
        let kind = cands.state.kind();
        match self.call(backend, &prompt.turns, |t| parse_policy_reply(t, kind, &actions)) {
            Ok(r) => Ok(Improvement {
                action: r.value.best_move,
                rationale: r.value.thought,
                fallback_used: false,
            }),
            Err(ValueOpsError::Parse { .. }) => {
                self.stats.fallbacks.fetch_add(1, Ordering::Relaxed);
                Ok(Improvement {
                    action: cands.best_by_verdict().clone(),
                    rationale: String::new(),
                    fallback_used: true,
                })
            }
            Err(e) => Err(e),
        }
    }
}
