//! Concrete text MDPs and scripted opponents.

pub mod breakthrough;
pub mod frozenlake;
pub mod maze;
pub mod tictactoe;

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env_core::{AgentAction, EnvError, EnvKind, Rng, State};
use crate::oracles::mcts::{mcts_select, MctsConfig};

use self::breakthrough::BreakthroughBoard;
use self::frozenlake::FrozenLakeGrid;
use self::maze::{MazeLayout, MazeWorld};
use self::tictactoe::TicTacToeBoard;

/// Configured environment: everything needed to produce initial states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EnvSpec {
    TicTacToe,
    Breakthrough,
    FrozenLake { map: String, slippery: bool, step_cap: u16 },
    Maze { layout: Arc<MazeLayout>, step_cap: u16 },
}

impl EnvSpec {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvSpec::TicTacToe => EnvKind::TicTacToe,
            EnvSpec::Breakthrough => EnvKind::Breakthrough,
            EnvSpec::FrozenLake { .. } => EnvKind::FrozenLake,
            EnvSpec::Maze { .. } => EnvKind::Maze,
        }
    }

    pub fn frozenlake_default(slippery: bool) -> Self {
        EnvSpec::FrozenLake {
            map: frozenlake::DEFAULT_LAYOUT.to_string(),
            slippery,
            step_cap: frozenlake::DEFAULT_STEP_CAP,
        }
    }

    pub fn maze(layout: &str) -> Result<Self, EnvError> {
        Ok(EnvSpec::Maze {
            layout: Arc::new(MazeLayout::load(layout)?),
            step_cap: maze::DEFAULT_STEP_CAP,
        })
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        self.start_states().map(|_| ())
    }

    /// All designated start states. Mazes start from every floor cell.
    pub fn start_states(&self) -> Result<Vec<State>, EnvError> {
        Ok(match self {
            EnvSpec::TicTacToe => vec![State::TicTacToe(TicTacToeBoard::empty())],
            EnvSpec::Breakthrough => vec![State::Breakthrough(BreakthroughBoard::initial())],
            EnvSpec::FrozenLake {
                map,
                slippery,
                step_cap,
            } => vec![State::FrozenLake(FrozenLakeGrid::parse(map, *slippery, *step_cap)?)],
            EnvSpec::Maze { layout, step_cap } => layout
                .start_cells()
                .into_iter()
                .map(|c| MazeWorld::new(layout.clone(), c, *step_cap).map(State::Maze))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn initial_state(&self) -> Result<State, EnvError> {
        self.start_states()?
            .into_iter()
            .next()
            .ok_or_else(|| EnvError::Layout("no start state".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpponentKind {
    FirstAvailable,
    UniformRandom,
    Mcts(MctsConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpponentPolicy {
    pub kind: OpponentKind,
    pub seed: u64,
}

impl OpponentPolicy {
    pub fn new(kind: OpponentKind, seed: u64) -> Self {
        OpponentPolicy { kind, seed }
    }
}

pub fn first_available(state: &State) -> Result<AgentAction, EnvError> {
    state
        .legal_actions()?
        .into_iter()
        .min_by_key(|a| a.id)
        .ok_or(EnvError::TerminalState)
}

pub fn uniform_random(state: &State, rng: &mut Rng) -> Result<AgentAction, EnvError> {
    let legal = state.legal_actions()?;
    if legal.is_empty() {
        return Err(EnvError::TerminalState);
    }
    Ok(legal[rng.gen_range(0..legal.len())].clone())
}

pub fn opponent_move(policy: &OpponentKind, state: &State, rng: &mut Rng) -> Result<AgentAction, EnvError> {
    match policy {
        OpponentKind::FirstAvailable => first_available(state),
        OpponentKind::UniformRandom => uniform_random(state, rng),
        OpponentKind::Mcts(cfg) => mcts_select(state, cfg, rng).map_err(|e| match e {
            crate::oracles::OracleError::Env(env) => env,
            other => EnvError::InvalidBoard(other.to_string()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_core::rng_from;

    #[test]
    fn first_available_is_lowest() {
        let s = State::TicTacToe(TicTacToeBoard::empty());
        assert_eq!(first_available(&s).unwrap().id, 1);
        let only7 = TicTacToeBoard::from_positions(&[1, 3, 6, 8], &[2, 4, 5, 9]).unwrap();
        assert_eq!(first_available(&State::TicTacToe(only7)).unwrap().id, 7);
    }

    #[test]
    fn uniform_random_two_actions() {
        let b = TicTacToeBoard::from_positions(&[2, 3, 4, 9], &[1, 5, 6]).unwrap();
        let s = State::TicTacToe(b);
        assert_eq!(s.legal_actions().unwrap().len(), 2);
        let mut counts = [0usize; 10];
        for seed in 0..10_000u64 {
            let mut rng = rng_from(seed);
            counts[uniform_random(&s, &mut rng).unwrap().id as usize] += 1;
        }
        for id in [7, 8] {
            let f = counts[id] as f64 / 10_000.0;
            assert!((f - 0.5).abs() < 0.02, "{id}: {f}");
        }
    }

    #[test]
    fn terminal_states_have_no_opponent_move() {
        let b = TicTacToeBoard::from_positions(&[1, 2, 3], &[4, 5]).unwrap();
        assert_eq!(
            opponent_move(&OpponentKind::FirstAvailable, &State::TicTacToe(b), &mut rng_from(0)),
            Err(EnvError::TerminalState)
        );
    }

    #[test]
    fn maze_start_states_cover_floor() {
        let spec = EnvSpec::maze("double_t").unwrap();
        assert_eq!(spec.start_states().unwrap().len(), 30);
    }
}
