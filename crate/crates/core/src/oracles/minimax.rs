//! Exact tic-tac-toe values with a table over every mark configuration.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::OracleError;
use crate::env_core::{AgentAction, Player};
use crate::environments::tictactoe::{self, TicTacToeBoard, LINES};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimaxResult {
    /// -1, 0 or +1 from the side to move.
    pub value: i8,
    /// Empty for terminal boards.
    pub optimal_actions: Vec<AgentAction>,
}

const STATES: usize = 19683 * 2;

fn key(cells: &[Option<Player>; 9], to_move: Player) -> usize {
    let mut k = 0usize;
    for c in cells {
        k = k * 3
            + match c {
                None => 0,
                Some(Player::O) => 1,
                _ => 2,
            };
    }
    k * 2 + usize::from(to_move == Player::X)
}

fn has_line(cells: &[Option<Player>; 9], p: Player) -> bool {
    LINES.iter().any(|l| l.iter().all(|&i| cells[i] == Some(p)))
}

fn solve(cells: &mut [Option<Player>; 9], to_move: Player, table: &mut [i8]) -> i8 {
    let k = key(cells, to_move);
    if table[k] != i8::MIN {
        return table[k];
    }
    let v = if has_line(cells, to_move.opponent()) {
        -1
    } else if has_line(cells, to_move) {
        1
    } else if cells.iter().all(Option::is_some) {
        0
    } else {
        let mut best = -2;
        for i in 0..9 {
            if cells[i].is_none() {
                cells[i] = Some(to_move);
                best = best.max(-solve(cells, to_move.opponent(), table));
                cells[i] = None;
            }
        }
        best
    };
    table[k] = v;
    v
}

fn table() -> &'static [i8] {
    static TABLE: OnceLock<Vec<i8>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = vec![i8::MIN; STATES];
        for to_move in [Player::O, Player::X] {
            solve(&mut [None; 9], to_move, &mut t);
        }
        t
    })
}

/// Value of `board` from the side to move, without validation.
pub fn value(board: &TicTacToeBoard) -> i8 {
    let t = table();
    let k = key(&board.cells, board.to_move);
    if t[k] != i8::MIN {
        return t[k];
    }
    // Configurations unreachable from an empty board are solved on demand.
    let mut scratch = t.to_vec();
    solve(&mut board.cells.clone(), board.to_move, &mut scratch)
}

/// Value from O's point of view.
pub fn value_for_o(board: &TicTacToeBoard) -> i8 {
    let v = value(board);
    if board.to_move == Player::O {
        v
    } else {
        -v
    }
}

/// Value of playing `cell` at `board`, from the mover's point of view.
pub fn action_value(board: &TicTacToeBoard, cell: u8) -> Result<i8, OracleError> {
    let next = board.play(cell)?;
    Ok(-value(&next))
}

pub fn minimax(board: &TicTacToeBoard) -> Result<MinimaxResult, OracleError> {
    TicTacToeBoard::from_cells(board.cells, Some(board.to_move))?;
    let v = value(board);
    if board.is_terminal() {
        return Ok(MinimaxResult {
            value: v,
            optimal_actions: Vec::new(),
        });
    }
    let optimal_actions = board
        .empty_cells()
        .into_iter()
        .filter(|&c| action_value(board, c).is_ok_and(|av| av == v))
        .map(tictactoe::action)
        .collect();
    Ok(MinimaxResult {
        value: v,
        optimal_actions,
    })
}
