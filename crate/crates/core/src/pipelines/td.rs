//! Language TD value training: a state dataset from self-play, a buffer of
//! short look-ahead variations per state, and one round of aggregated
//! value targets.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env_core::{derive_seed, rng_from, AgentAction, EnvKind, State, Trajectory};
use crate::environments::breakthrough::{describe_sequence, BreakthroughBoard};
use crate::environments::{opponent_move, OpponentKind};
use crate::lm_backend::Backend;
use crate::oracles::mcts::MctsConfig;
use crate::oracles::winrate::{is_white_seat, PolicyPair};
use crate::oracles::PLAYOUT_CAP;
use crate::util::stable_hash;
use crate::value_ops::{prompts, LanguageValueEstimate, ValueOps, VariationPacket};

use super::trace::{Phase, TraceLog};
use super::{with_pool, PipelineError, PipelineKind, SftExample, SftTags, TrainingSet};

/// Percentage of states that go to the training split.
pub const TRAIN_PERCENT: u64 = 85;

#[derive(Debug, Clone, PartialEq)]
pub struct StateDataset {
    pub train: Vec<State>,
    pub test: Vec<State>,
    pub pairs: usize,
}

impl StateDataset {
    pub fn all(&self) -> impl Iterator<Item = &State> {
        self.train.iter().chain(&self.test)
    }
}

pub fn is_train(state: &State) -> bool {
    stable_hash(&state.text()) % 100 < TRAIN_PERCENT
}

/// Self-play between every ordered pair of search policies drawn from
/// `sim_grid` x `rollout_grid`. Non-terminal states are kept once each,
/// in first-visit order, and split by a hash of their text.
pub fn build_state_dataset(
    sim_grid: &[u32],
    rollout_grid: &[u32],
    games_per_pair: usize,
    seed: u64,
    parallel: usize,
) -> Result<StateDataset, PipelineError> {
    if sim_grid.is_empty() || rollout_grid.is_empty() || games_per_pair == 0 {
        return Err(PipelineError::Config(
            "grids and games_per_pair must be non-empty".into(),
        ));
    }
    let policies: Vec<MctsConfig> = sim_grid
        .iter()
        .flat_map(|&s| {
            rollout_grid.iter().map(move |&r| MctsConfig {
                simulations: s,
                rollouts_per_eval: r,
                ..MctsConfig::default()
            })
        })
        .collect();
    for p in &policies {
        p.validate()?;
    }
    let games: Vec<(usize, usize, usize)> = (0..policies.len())
        .flat_map(|w| (0..policies.len()).flat_map(move |b| (0..games_per_pair).map(move |g| (w, b, g))))
        .collect();
    let pairs = policies.len() * policies.len();
    let played = with_pool(parallel, || {
        games
            .par_iter()
            .map(|&(w, b, g)| {
                let pair = PolicyPair {
                    white: OpponentKind::Mcts(policies[w].clone()),
                    black: OpponentKind::Mcts(policies[b].clone()),
                };
                self_play(&pair, derive_seed(seed, &[w as u64, b as u64, g as u64]))
            })
            .collect::<Vec<_>>()
    })?;
    let mut seen = HashSet::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for game in played {
        for s in game? {
            if seen.insert(s.text()) {
                if is_train(&s) {
                    train.push(s);
                } else {
                    test.push(s);
                }
            }
        }
    }
    Ok(StateDataset { train, test, pairs })
}

fn self_play(pair: &PolicyPair, seed: u64) -> Result<Vec<State>, PipelineError> {
    let mut rng = rng_from(seed);
    let mut s = State::Breakthrough(BreakthroughBoard::initial());
    let mut states = Vec::new();
    for _ in 0..PLAYOUT_CAP {
        if s.is_terminal() {
            break;
        }
        states.push(s.clone());
        let policy = if is_white_seat(s.mover()) {
            &pair.white
        } else {
            &pair.black
        };
        let a = opponent_move(policy, &s, &mut rng)?;
        s = s.apply(&a, &mut rng)?.state_after;
    }
    Ok(states)
}

/// What makes two variations different.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distinctness {
    #[default]
    FullSequence,
    FirstAction,
}

impl Distinctness {
    pub fn key(self, traj: &Trajectory) -> Vec<u32> {
        let ids = traj.transitions.iter().map(|t| t.action.id);
        match self {
            Distinctness::FullSequence => ids.collect(),
            Distinctness::FirstAction => ids.take(1).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdEntry {
    pub anchor: State,
    pub variations: Vec<Trajectory>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TdBuffer {
    pub entries: Vec<TdEntry>,
    /// Anchors that got fewer than K distinct variations, with the count found.
    pub underfilled: Vec<(usize, usize)>,
    pub skipped_terminal: usize,
}

/// Up to `k` distinct `l`-ply rollouts per state, trying at most 8·k times.
pub fn build_td_buffer(
    states: &[State],
    rollout: &PolicyPair,
    l: usize,
    k: usize,
    distinctness: Distinctness,
    seed: u64,
    parallel: usize,
) -> Result<TdBuffer, PipelineError> {
    if l == 0 || k == 0 {
        return Err(PipelineError::Config("l and K must be positive".into()));
    }
    let per_state = with_pool(parallel, || {
        states
            .par_iter()
            .map(|s| {
                if s.is_terminal() {
                    return Ok(None);
                }
                let base = derive_seed(seed, &[stable_hash(&s.text())]);
                let mut seen = HashSet::new();
                let mut variations = Vec::new();
                for attempt in 0..8 * k {
                    let v = lookahead(s, rollout, l, derive_seed(base, &[attempt as u64]))?;
                    if seen.insert(distinctness.key(&v)) {
                        variations.push(v);
                        if variations.len() == k {
                            break;
                        }
                    }
                }
                Ok(Some(variations))
            })
            .collect::<Vec<Result<_, PipelineError>>>()
    })?;
    let mut buffer = TdBuffer::default();
    for (s, r) in states.iter().zip(per_state) {
        match r? {
            None => buffer.skipped_terminal += 1,
            Some(variations) => {
                if variations.len() < k {
                    buffer.underfilled.push((buffer.entries.len(), variations.len()));
                }
                buffer.entries.push(TdEntry {
                    anchor: s.clone(),
                    variations,
                });
            }
        }
    }
    Ok(buffer)
}

fn lookahead(start: &State, pair: &PolicyPair, l: usize, seed: u64) -> Result<Trajectory, PipelineError> {
    let mut rng = rng_from(seed);
    let mut traj = Trajectory::new(seed);
    let mut s = start.clone();
    while traj.len() < l && !s.is_terminal() {
        let policy = if is_white_seat(s.mover()) {
            &pair.white
        } else {
            &pair.black
        };
        let a: AgentAction = opponent_move(policy, &s, &mut rng)?;
        let t = s.apply(&a, &mut rng)?;
        s = t.state_after.clone();
        traj.transitions.push(t);
    }
    Ok(traj)
}

/// One aggregated target with the inputs it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct TdRecord {
    pub anchor: State,
    pub packets: Vec<VariationPacket>,
    pub target: LanguageValueEstimate,
    pub example: SftExample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdOutput {
    pub set: TrainingSet,
    pub records: Vec<TdRecord>,
    /// Entries whose evaluation or aggregation failed.
    pub dropped: usize,
    pub trace: TraceLog,
}

fn describe(v: &Trajectory, kind: EnvKind) -> Result<String, PipelineError> {
    Ok(match kind {
        EnvKind::Breakthrough => describe_sequence(&v.transitions)?,
        _ => prompts::narrate(v, kind)?,
    })
}

fn td_entry(
    entry: &TdEntry,
    ops: &ValueOps,
    value: &dyn Backend,
    agg: &dyn Backend,
    tags: SftTags,
) -> Result<TdRecord, PipelineError> {
    let kind = entry.anchor.kind();
    let mut packets = Vec::with_capacity(entry.variations.len());
    for v in &entry.variations {
        let end = v
            .final_state()
            .ok_or_else(|| PipelineError::Config("empty variation".into()))?;
        packets.push(VariationPacket {
            move_description: describe(v, kind)?,
            successor_text: match end {
                State::Breakthrough(b) => b.describe(),
                other => other.text(),
            },
            successor_evaluation: ops.query_value(end, None, value)?,
        });
    }
    let target = ops.language_td_target(&entry.anchor, None, &packets, agg)?;
    let prompt = prompts::value_query_prompt(&ops.registry, &entry.anchor, None)?;
    let example = SftExample::new(prompt.turns, target.narrative.clone(), tags)?;
    Ok(TdRecord {
        anchor: entry.anchor.clone(),
        packets,
        target,
        example,
    })
}

/// Evaluates each variation's last state, aggregates per anchor and emits
/// value examples keyed by the anchor's direct value prompt.
pub fn generate_td_training_set(
    buffer: &TdBuffer,
    ops: &ValueOps,
    value: &dyn Backend,
    agg: &dyn Backend,
    iteration: u32,
    parallel: usize,
) -> Result<TdOutput, PipelineError> {
    let Some(first) = buffer.entries.first() else {
        return Err(PipelineError::Config("empty look-ahead buffer".into()));
    };
    let tags = SftTags {
        iteration,
        pipeline: PipelineKind::TdTrain,
        env: first.anchor.kind(),
    };
    let results = with_pool(parallel, || {
        buffer
            .entries
            .par_iter()
            .map(|e| td_entry(e, ops, value, agg, tags))
            .collect::<Vec<_>>()
    })?;
    let mut records = Vec::new();
    let mut dropped = 0;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) if e.is_fatal() => return Err(e),
            Err(_) => dropped += 1,
        }
    }
    let variations: usize = buffer.entries.iter().map(|e| e.variations.len()).sum();
    let mut trace = TraceLog::new();
    trace.push(0, Phase::Rollout, "lookahead_buffer", variations);
    trace.push(0, Phase::Evaluate, "variation_values", variations);
    trace.push(0, Phase::Aggregate, "td_targets", records.len());
    trace.push(0, Phase::Emit, "value_sft", records.len());
    Ok(TdOutput {
        set: TrainingSet::new(records.iter().map(|r| r.example.clone()).collect()),
        records,
        dropped,
        trace,
    })
}
