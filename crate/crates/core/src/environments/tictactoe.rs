//! 3x3 tic-tac-toe with cells numbered 1-9 row-major. O moves first.

use serde::{Deserialize, Serialize};

use crate::env_core::{AgentAction, EnvError, Outcome, Player, State, TransitionRecord};

pub const LINES: [[usize; 3]; 8] = [
    [0, 1, 2],
    [3, 4, 5],
    [6, 7, 8],
    [0, 3, 6],
    [1, 4, 7],
    [2, 5, 8],
    [0, 4, 8],
    [2, 4, 6],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TicTacToeBoard {
    pub cells: [Option<Player>; 9],
    pub to_move: Player,
}

impl Default for TicTacToeBoard {
    fn default() -> Self {
        Self::empty()
    }
}

impl TicTacToeBoard {
    pub fn empty() -> Self {
        TicTacToeBoard {
            cells: [None; 9],
            to_move: Player::O,
        }
    }

    /// Builds a board from 1-based cell lists. The side to move follows the
    /// counts; with equal counts O moves.
    pub fn from_positions(o: &[u8], x: &[u8]) -> Result<Self, EnvError> {
        let mut cells = [None; 9];
        for (marks, p) in [(o, Player::O), (x, Player::X)] {
            for &c in marks {
                if !(1..=9).contains(&c) || cells[(c - 1) as usize].is_some() {
                    return Err(EnvError::InvalidBoard(format!("bad cell {c}")));
                }
                cells[(c - 1) as usize] = Some(p);
            }
        }
        Self::from_cells(cells, None)
    }

    /// Validates counts and winners. `to_move` is required only when the
    /// counts are equal and X is meant to move.
    pub fn from_cells(cells: [Option<Player>; 9], to_move: Option<Player>) -> Result<Self, EnvError> {
        if cells.iter().flatten().any(|p| !matches!(p, Player::O | Player::X)) {
            return Err(EnvError::InvalidBoard("cells hold only O or X".into()));
        }
        let n_o = cells.iter().filter(|c| **c == Some(Player::O)).count() as i32;
        let n_x = cells.iter().filter(|c| **c == Some(Player::X)).count() as i32;
        if (n_o - n_x).abs() > 1 {
            return Err(EnvError::InvalidBoard(format!("counts O={n_o} X={n_x}")));
        }
        let derived = match n_o.cmp(&n_x) {
            std::cmp::Ordering::Greater => Player::X,
            std::cmp::Ordering::Less => Player::O,
            std::cmp::Ordering::Equal => to_move.unwrap_or(Player::O),
        };
        if let Some(t) = to_move {
            if t != derived {
                return Err(EnvError::InvalidBoard("side to move inconsistent with counts".into()));
            }
        }
        let board = TicTacToeBoard {
            cells,
            to_move: derived,
        };
        let o_wins = board.has_line(Player::O);
        let x_wins = board.has_line(Player::X);
        if o_wins && x_wins {
            return Err(EnvError::InvalidBoard("both sides have a line".into()));
        }
        // The side that just moved is the only one that may hold a line.
        if (o_wins && derived == Player::O) || (x_wins && derived == Player::X) {
            return Err(EnvError::InvalidBoard("winner is also the side to move".into()));
        }
        Ok(board)
    }

    fn has_line(&self, p: Player) -> bool {
        LINES.iter().any(|l| l.iter().all(|&i| self.cells[i] == Some(p)))
    }

    /// Winning side and its first completed line (1-based cells).
    pub fn winner(&self) -> Option<(Player, [u8; 3])> {
        LINES.iter().find_map(|l| {
            let p = self.cells[l[0]]?;
            (self.cells[l[1]] == Some(p) && self.cells[l[2]] == Some(p))
                .then(|| (p, [l[0] as u8 + 1, l[1] as u8 + 1, l[2] as u8 + 1]))
        })
    }

    pub fn is_full(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }

    pub fn is_terminal(&self) -> bool {
        self.winner().is_some() || self.is_full()
    }

    pub fn empty_cells(&self) -> Vec<u8> {
        (0..9)
            .filter(|&i| self.cells[i].is_none())
            .map(|i| i as u8 + 1)
            .collect()
    }

    pub fn legal_actions(&self) -> Result<Vec<AgentAction>, EnvError> {
        if self.is_terminal() {
            return Err(EnvError::TerminalState);
        }
        Ok(self.empty_cells().into_iter().map(action).collect())
    }

    /// Places the mover's mark on a 1-based cell.
    pub fn play(&self, cell: u8) -> Result<Self, EnvError> {
        if self.is_terminal() {
            return Err(EnvError::TerminalState);
        }
        if !(1..=9).contains(&cell) || self.cells[(cell - 1) as usize].is_some() {
            return Err(EnvError::IllegalAction(cell.to_string()));
        }
        let mut next = *self;
        next.cells[(cell - 1) as usize] = Some(self.to_move);
        next.to_move = self.to_move.opponent();
        Ok(next)
    }

    pub fn apply(&self, a: &AgentAction) -> Result<TransitionRecord, EnvError> {
        let cell = u8::try_from(a.id).map_err(|_| EnvError::IllegalAction(a.display.clone()))?;
        let after = self.play(cell)?;
        let mover = self.to_move;
        let (reward, outcome) = match after.winner() {
            Some((p, _)) => (if p == mover { 1.0 } else { -1.0 }, Some(Outcome::Win(p))),
            None if after.is_full() => (0.0, Some(Outcome::Draw)),
            None => (0.0, None),
        };
        Ok(TransitionRecord {
            state_before: State::TicTacToe(*self),
            action: action(cell),
            reward,
            state_after: State::TicTacToe(after),
            terminal: outcome.is_some(),
            outcome,
        })
    }

    pub fn render(&self) -> String {
        let sym = |i: usize| match self.cells[i] {
            Some(p) => p.label().to_string(),
            None => (i + 1).to_string(),
        };
        let row = |r: usize| format!("{} | {} | {}", sym(3 * r), sym(3 * r + 1), sym(3 * r + 2));
        format!("{}\n---------\n{}\n---------\n{}", row(0), row(1), row(2))
    }

    /// Inverse of `render`. Tolerates a trailing period and surrounding whitespace.
    pub fn parse(text: &str, to_move: Option<Player>) -> Result<Self, EnvError> {
        let rows: Vec<&str> = text
            .trim()
            .trim_end_matches('.')
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('-'))
            .collect();
        if rows.len() != 3 {
            return Err(EnvError::InvalidBoard(format!("expected 3 rows, got {}", rows.len())));
        }
        let mut cells = [None; 9];
        for (r, line) in rows.iter().enumerate() {
            let parts: Vec<&str> = line.split('|').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(EnvError::InvalidBoard(format!("bad row `{line}`")));
            }
            for (c, tok) in parts.iter().enumerate() {
                let i = 3 * r + c;
                cells[i] = match *tok {
                    "O" => Some(Player::O),
                    "X" => Some(Player::X),
                    t if t == (i + 1).to_string() => None,
                    t => return Err(EnvError::InvalidBoard(format!("bad cell `{t}`"))),
                };
            }
        }
        Self::from_cells(cells, to_move)
    }

    /// Same position with the marks (and side to move) exchanged.
    pub fn swapped(&self) -> Self {
        let mut cells = self.cells;
        for c in cells.iter_mut() {
            *c = c.map(Player::opponent);
        }
        TicTacToeBoard {
            cells,
            to_move: self.to_move.opponent(),
        }
    }

    pub fn ending_text(&self) -> String {
        match self.winner() {
            Some((p, line)) => format!(
                "The game is over. {p} wins. {p} wins by occupying the positions [{}, {}, {}].",
                line[0], line[1], line[2]
            ),
            None => "The game is over. The game is a draw.".to_string(),
        }
    }
}

pub fn action(cell: u8) -> AgentAction {
    AgentAction::new(cell as u32, cell.to_string())
}

pub fn parse_action(legal: &[AgentAction], text: &str) -> Option<AgentAction> {
    let id: u32 = text.trim().trim_end_matches('.').parse().ok()?;
    legal.iter().find(|a| a.id == id).cloned()
}

pub fn describe_transition(before: &TicTacToeBoard, a: &AgentAction, after: &TicTacToeBoard) -> String {
    format!(
        "After {} taking action {}, the board position is:\n{}",
        before.to_move,
        a.id,
        after.render()
    )
}

/// "4, 6, 7, 8, 9" as used by the policy prompt.
pub fn join_positions(cells: &[u32]) -> String {
    cells.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
}
