//! Environment-independent types: actions, transitions, trajectories and the
//! text observation contract every concrete environment satisfies.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environments::breakthrough::BreakthroughBoard;
use crate::environments::frozenlake::FrozenLakeGrid;
use crate::environments::maze::MazeWorld;
use crate::environments::tictactoe::TicTacToeBoard;
use crate::environments::{breakthrough, frozenlake, maze, tictactoe};

/// RNG used everywhere randomness is needed; portable and seedable.
pub type Rng = ChaCha8Rng;

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Mixes a base seed with an index path into an independent stream seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix(base ^ 0x6a09_e667_f3bc_c909);
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown environment kind `{0}`")]
    UnknownEnvKind(String),
    #[error("state is terminal")]
    TerminalState,
    #[error("illegal action `{0}`")]
    IllegalAction(String),
    #[error("invalid board: {0}")]
    InvalidBoard(String),
    #[error("record does not belong to environment {0}")]
    KindMismatch(EnvKind),
    #[error("layout error: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "tictactoe")]
    TicTacToe,
    #[serde(rename = "breakthrough")]
    Breakthrough,
    #[serde(rename = "frozenlake")]
    FrozenLake,
    #[serde(rename = "maze")]
    Maze,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [
        EnvKind::TicTacToe,
        EnvKind::Breakthrough,
        EnvKind::FrozenLake,
        EnvKind::Maze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::TicTacToe => "tictactoe",
            EnvKind::Breakthrough => "breakthrough",
            EnvKind::FrozenLake => "frozenlake",
            EnvKind::Maze => "maze",
        }
    }

    pub fn is_two_player(self) -> bool {
        matches!(self, EnvKind::TicTacToe | EnvKind::Breakthrough)
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "tictactoe" => Ok(EnvKind::TicTacToe),
            "breakthrough" => Ok(EnvKind::Breakthrough),
            "frozenlake" => Ok(EnvKind::FrozenLake),
            "maze" => Ok(EnvKind::Maze),
            _ => Err(EnvError::UnknownEnvKind(s.to_string())),
        }
    }
}

/// Side labels. Tic-tac-toe uses O/X, Breakthrough uses White/Black,
/// single-agent environments use `Agent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Player {
    O,
    X,
    White,
    Black,
    Agent,
}

impl Player {
    pub fn opponent(self) -> Player {
        match self {
            Player::O => Player::X,
            Player::X => Player::O,
            Player::White => Player::Black,
            Player::Black => Player::White,
            Player::Agent => Player::Agent,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Player::O => "O",
            Player::X => "X",
            Player::White => "White",
            Player::Black => "Black",
            Player::Agent => "agent",
        }
    }
}

impl fmt::Display for Player {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Win(Player),
    Draw,
    Fail,
    Success,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentAction {
    pub id: u32,
    pub display: String,
}

impl AgentAction {
    pub fn new(id: u32, display: impl Into<String>) -> Self {
        AgentAction {
            id,
            display: display.into(),
        }
    }
}

impl fmt::Display for AgentAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextObservation {
    pub body: String,
    pub legal_actions: Vec<AgentAction>,
    pub mover: String,
}

/// Immutable snapshot of any supported environment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum State {
    #[serde(rename = "tictactoe")]
    TicTacToe(TicTacToeBoard),
    #[serde(rename = "breakthrough")]
    Breakthrough(BreakthroughBoard),
    #[serde(rename = "frozenlake")]
    FrozenLake(FrozenLakeGrid),
    #[serde(rename = "maze")]
    Maze(MazeWorld),
}

impl State {
    pub fn kind(&self) -> EnvKind {
        match self {
            State::TicTacToe(_) => EnvKind::TicTacToe,
            State::Breakthrough(_) => EnvKind::Breakthrough,
            State::FrozenLake(_) => EnvKind::FrozenLake,
            State::Maze(_) => EnvKind::Maze,
        }
    }

    pub fn is_terminal(&self) -> bool {
        match self {
            State::TicTacToe(b) => b.is_terminal(),
            State::Breakthrough(b) => b.is_terminal(),
            State::FrozenLake(g) => g.is_terminal(),
            State::Maze(m) => m.is_terminal(),
        }
    }

    /// Side to act; `Agent` for single-agent environments.
    pub fn mover(&self) -> Player {
        match self {
            State::TicTacToe(b) => b.to_move,
            State::Breakthrough(b) => b.to_move,
            _ => Player::Agent,
        }
    }

    /// Canonical body text of `textualize`.
    pub fn text(&self) -> String {
        match self {
            State::TicTacToe(b) => b.render(),
            State::Breakthrough(b) => b.describe(),
            State::FrozenLake(g) => g.render(),
            State::Maze(m) => m.render_history(),
        }
    }

    pub fn legal_actions(&self) -> Result<Vec<AgentAction>, EnvError> {
        match self {
            State::TicTacToe(b) => b.legal_actions(),
            State::Breakthrough(b) => b.legal_actions(),
            State::FrozenLake(g) => g.legal_actions(),
            State::Maze(m) => m.legal_actions(),
        }
    }

    pub fn textualize(&self) -> TextObservation {
        TextObservation {
            body: self.text(),
            legal_actions: self.legal_actions().unwrap_or_default(),
            mover: self.mover().label().to_string(),
        }
    }

    /// Parses an action from its display form (or bare id) at this state.
    pub fn parse_action(&self, text: &str) -> Option<AgentAction> {
        let legal = self.legal_actions().ok()?;
        match self {
            State::TicTacToe(_) => tictactoe::parse_action(&legal, text),
            State::Breakthrough(_) => breakthrough::parse_action(&legal, text),
            State::FrozenLake(_) => frozenlake::parse_action(&legal, text),
            State::Maze(_) => maze::parse_action(&legal, text),
        }
    }

    pub fn apply(&self, action: &AgentAction, rng: &mut Rng) -> Result<TransitionRecord, EnvError> {
        match self {
            State::TicTacToe(b) => b.apply(action),
            State::Breakthrough(b) => b.apply(action),
            State::FrozenLake(g) => g.apply(action, rng),
            State::Maze(m) => m.apply(action),
        }
    }

    /// Sentence describing how the episode ended at this terminal state.
    pub fn ending_text(&self) -> Option<String> {
        if !self.is_terminal() {
            return None;
        }
        Some(match self {
            State::TicTacToe(b) => b.ending_text(),
            State::Breakthrough(b) => b.ending_text(),
            State::FrozenLake(g) => g.ending_text(),
            State::Maze(m) => m.ending_text(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub state_before: State,
    pub action: AgentAction,
    pub reward: f64,
    pub state_after: State,
    pub terminal: bool,
    pub outcome: Option<Outcome>,
}

impl TransitionRecord {
    pub fn mover(&self) -> Player {
        self.state_before.mover()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<TransitionRecord>,
    pub seed: u64,
}

impl Trajectory {
    pub fn new(seed: u64) -> Self {
        Trajectory {
            transitions: Vec::new(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn final_state(&self) -> Option<&State> {
        self.transitions.last().map(|t| &t.state_after)
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.transitions.last().and_then(|t| t.outcome)
    }

    /// Checks chaining and terminal placement.
    pub fn is_well_formed(&self) -> bool {
        let chained = self
            .transitions
            .windows(2)
            .all(|w| w[0].state_after == w[1].state_before);
        let terminals = self.transitions.iter().filter(|t| t.terminal).count();
        let last_ok = terminals == 0 || self.transitions.last().is_some_and(|t| t.terminal);
        let outcomes_ok = self.transitions.iter().all(|t| t.terminal || t.outcome.is_none());
        chained && terminals <= 1 && last_ok && outcomes_ok
    }

    pub fn to_lines(&self) -> Vec<TrajectoryLine> {
        self.transitions
            .iter()
            .enumerate()
            .map(|(i, t)| TrajectoryLine {
                state_text: t.state_before.text(),
                action_id: t.action.id,
                action_display: t.action.display.clone(),
                reward: t.reward,
                terminal: t.terminal,
                outcome: t.outcome,
                seed: self.seed,
                step: i,
                state: t.state_before.clone(),
                next_state: t.state_after.clone(),
            })
            .collect()
    }

    /// Regroups JSONL lines into trajectories (consecutive lines sharing a seed, step restarting at 0).
    pub fn from_lines(lines: Vec<TrajectoryLine>) -> Vec<Trajectory> {
        let mut out: Vec<Trajectory> = Vec::new();
        for line in lines {
            let start_new = line.step == 0 || out.last().is_none_or(|t| t.seed != line.seed);
            if start_new {
                out.push(Trajectory::new(line.seed));
            }
            let traj = out.last_mut().expect("pushed above");
            traj.transitions.push(TransitionRecord {
                state_before: line.state,
                action: AgentAction::new(line.action_id, line.action_display),
                reward: line.reward,
                state_after: line.next_state,
                terminal: line.terminal,
                outcome: line.outcome,
            });
        }
        out
    }
}

/// One JSONL line per transition. `step`, `state` and `next_state` extend the
/// minimal field set so trajectories can be reloaded on resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLine {
    pub state_text: String,
    pub action_id: u32,
    pub action_display: String,
    pub reward: f64,
    pub terminal: bool,
    pub outcome: Option<Outcome>,
    pub seed: u64,
    pub step: usize,
    pub state: State,
    pub next_state: State,
}

/// Σ γ^i r_i over the trajectory's transitions.
pub fn trajectory_return(traj: &Trajectory, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for t in &traj.transitions {
        total += discount * t.reward;
        discount *= gamma;
    }
    total
}

/// Canonical sentence for one transition. `step` is the 1-based position of
/// the transition inside a move sequence; only Breakthrough prints it.
pub fn render_transition_description(t: &TransitionRecord, kind: EnvKind, step: usize) -> Result<String, EnvError> {
    match (kind, &t.state_before, &t.state_after) {
        (EnvKind::TicTacToe, State::TicTacToe(before), State::TicTacToe(after)) => {
            Ok(tictactoe::describe_transition(before, &t.action, after))
        }
        (EnvKind::Breakthrough, State::Breakthrough(before), State::Breakthrough(after)) => {
            breakthrough::describe_transition(before, &t.action, after, step)
        }
        (EnvKind::FrozenLake, State::FrozenLake(_), State::FrozenLake(after)) => {
            Ok(frozenlake::describe_transition(&t.action, after))
        }
        (EnvKind::Maze, State::Maze(_), State::Maze(after)) => Ok(maze::describe_transition(&t.action, after)),
        _ => Err(EnvError::KindMismatch(kind)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::tictactoe::TicTacToeBoard;

    fn ttt_traj(rewards: &[f64]) -> Trajectory {
        let s = State::TicTacToe(TicTacToeBoard::empty());
        Trajectory {
            transitions: rewards
                .iter()
                .map(|&r| TransitionRecord {
                    state_before: s.clone(),
                    action: AgentAction::new(1, "1"),
                    reward: r,
                    state_after: s.clone(),
                    terminal: false,
                    outcome: None,
                })
                .collect(),
            seed: 0,
        }
    }

    #[test]
    fn returns() {
        assert_eq!(trajectory_return(&ttt_traj(&[1.0]), 0.3), 1.0);
        assert_eq!(trajectory_return(&ttt_traj(&[0.0, 0.0, 1.0]), 1.0), 1.0);
        assert!((trajectory_return(&ttt_traj(&[1.0, 1.0]), 0.9) - 1.9).abs() < 1e-12);
        assert_eq!(trajectory_return(&ttt_traj(&[0.5, 2.0, 3.0]), 0.0), 0.5);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("tic-tac-toe".parse::<EnvKind>().unwrap(), EnvKind::TicTacToe);
        assert_eq!("FrozenLake".parse::<EnvKind>().unwrap(), EnvKind::FrozenLake);
        assert!(matches!("chess".parse::<EnvKind>(), Err(EnvError::UnknownEnvKind(_))));
    }

    #[test]
    fn seeds_differ_by_path() {
        assert_ne!(derive_seed(7, &[0]), derive_seed(7, &[1]));
        assert_ne!(derive_seed(7, &[0, 1]), derive_seed(7, &[1, 0]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }

    #[test]
    fn outcome_serialization() {
        let s = serde_json::to_string(&Outcome::Win(Player::O)).unwrap();
        assert_eq!(s, r#"{"win":"O"}"#);
        assert_eq!(serde_json::to_string(&Outcome::Draw).unwrap(), r#""draw""#);
    }

    #[test]
    fn mismatched_kind_is_rejected() {
        let t = &ttt_traj(&[0.0]).transitions[0];
        assert_eq!(
            render_transition_description(t, EnvKind::Maze, 1),
            Err(EnvError::KindMismatch(EnvKind::Maze))
        );
    }
}
