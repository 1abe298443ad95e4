//! Scalar ground truth: exact minimax, Monte-Carlo win rates and UCT search.

pub mod mcts;
pub mod minimax;
pub mod winrate;

use rand::Rng as _;
use thiserror::Error;

use crate::env_core::{EnvError, EnvKind, Player, Rng, State};
use crate::environments::breakthrough::BreakthroughBoard;
use crate::environments::tictactoe::TicTacToeBoard;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("oracle not available for {0}")]
    Unsupported(EnvKind),
    #[error("invalid oracle configuration: {0}")]
    Config(String),
    #[error("game exceeded {0} plies")]
    NonterminatingGame(usize),
}

/// Hard ply limit for playouts; both games finish far sooner.
pub const PLAYOUT_CAP: usize = 400;

/// Plays uniformly random moves for both sides until the game ends and
/// returns the winner (`None` for a draw).
pub fn random_playout(state: &State, rng: &mut Rng) -> Result<Option<Player>, OracleError> {
    match state {
        State::TicTacToe(b) => Ok(ttt_playout(*b, rng)),
        State::Breakthrough(b) => bt_playout(*b, rng),
        other => Err(OracleError::Unsupported(other.kind())),
    }
}

fn ttt_playout(mut b: TicTacToeBoard, rng: &mut Rng) -> Option<Player> {
    loop {
        if let Some((p, _)) = b.winner() {
            return Some(p);
        }
        let empty = b.empty_cells();
        if empty.is_empty() {
            return None;
        }
        b = b.play(empty[rng.gen_range(0..empty.len())]).expect("empty cell");
    }
}

fn bt_playout(mut b: BreakthroughBoard, rng: &mut Rng) -> Result<Option<Player>, OracleError> {
    for _ in 0..PLAYOUT_CAP {
        if let Some(w) = b.winner() {
            return Ok(Some(w));
        }
        let moves = b.moves_for(b.to_move);
        b = b.play(&moves[rng.gen_range(0..moves.len())]);
    }
    Err(OracleError::NonterminatingGame(PLAYOUT_CAP))
}
