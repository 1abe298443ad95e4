//! 5x5 Breakthrough. Rows 1-5 bottom to top, columns a-e. White starts on
//! rows 1-2 and moves up, Black starts on rows 4-5 and moves down. Black
//! moves first.

use serde::{Deserialize, Serialize};

use crate::env_core::{AgentAction, EnvError, Outcome, Player, State, TransitionRecord};

pub const SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BreakthroughBoard {
    /// Index `(row - 1) * 5 + col`.
    pub grid: [Option<Player>; 25],
    pub to_move: Player,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Move {
    pub from: usize,
    pub to: usize,
    pub capture: bool,
}

impl Move {
    pub fn id(&self) -> u32 {
        (self.from * 25 + self.to) as u32
    }

    pub fn notation(&self) -> String {
        format!(
            "{}{}{}",
            square_name(self.from),
            square_name(self.to),
            if self.capture { "*" } else { "" }
        )
    }

    pub fn action(&self) -> AgentAction {
        AgentAction::new(self.id(), self.notation())
    }
}

pub fn square(row: usize, col: usize) -> usize {
    (row - 1) * SIZE + col
}

pub fn row_of(sq: usize) -> usize {
    sq / SIZE + 1
}

pub fn col_of(sq: usize) -> usize {
    sq % SIZE
}

pub fn col_letter(col: usize) -> char {
    (b'a' + col as u8) as char
}

pub fn square_name(sq: usize) -> String {
    format!("{}{}", col_letter(col_of(sq)), row_of(sq))
}

pub fn parse_square(s: &str) -> Option<usize> {
    let b = s.as_bytes();
    if b.len() != 2 {
        return None;
    }
    let col = b[0].checked_sub(b'a')? as usize;
    let row = b[1].checked_sub(b'0')? as usize;
    ((0..SIZE).contains(&col) && (1..=SIZE).contains(&row)).then(|| square(row, col))
}

fn forward(p: Player) -> isize {
    if p == Player::White {
        1
    } else {
        -1
    }
}

fn side_name(p: Player) -> &'static str {
    p.label()
}

impl Default for BreakthroughBoard {
    fn default() -> Self {
        Self::initial()
    }
}

impl BreakthroughBoard {
    pub fn initial() -> Self {
        let mut grid = [None; 25];
        for col in 0..SIZE {
            for row in [1, 2] {
                grid[square(row, col)] = Some(Player::White);
            }
            for row in [4, 5] {
                grid[square(row, col)] = Some(Player::Black);
            }
        }
        BreakthroughBoard {
            grid,
            to_move: Player::Black,
        }
    }

    pub fn count(&self, p: Player) -> usize {
        self.grid.iter().filter(|c| **c == Some(p)).count()
    }

    /// Pieces of `p` in display order: top row first, then a to e.
    pub fn pieces(&self, p: Player) -> Vec<usize> {
        (1..=SIZE)
            .rev()
            .flat_map(|row| (0..SIZE).map(move |col| square(row, col)))
            .filter(|&sq| self.grid[sq] == Some(p))
            .collect()
    }

    /// Pseudo-legal moves for `p` regardless of game end, ordered by id.
    pub fn moves_for(&self, p: Player) -> Vec<Move> {
        let dir = forward(p);
        let mut out = Vec::new();
        for from in 0..25 {
            if self.grid[from] != Some(p) {
                continue;
            }
            let nr = row_of(from) as isize + dir;
            if !(1..=SIZE as isize).contains(&nr) {
                continue;
            }
            let col = col_of(from) as isize;
            for dc in [-1isize, 0, 1] {
                let nc = col + dc;
                if !(0..SIZE as isize).contains(&nc) {
                    continue;
                }
                let to = square(nr as usize, nc as usize);
                match self.grid[to] {
                    None => out.push(Move {
                        from,
                        to,
                        capture: false,
                    }),
                    Some(q) if dc != 0 && q == p.opponent() => out.push(Move {
                        from,
                        to,
                        capture: true,
                    }),
                    _ => {}
                }
            }
        }
        out.sort_by_key(Move::id);
        out
    }

    /// Winner, if the game is over. A side with no pieces or, when to move,
    /// no legal move loses.
    pub fn winner(&self) -> Option<Player> {
        if (0..SIZE).any(|c| self.grid[square(SIZE, c)] == Some(Player::White)) {
            return Some(Player::White);
        }
        if (0..SIZE).any(|c| self.grid[square(1, c)] == Some(Player::Black)) {
            return Some(Player::Black);
        }
        for p in [Player::White, Player::Black] {
            if self.count(p) == 0 {
                return Some(p.opponent());
            }
        }
        if self.moves_for(self.to_move).is_empty() {
            return Some(self.to_move.opponent());
        }
        None
    }

    pub fn is_terminal(&self) -> bool {
        self.winner().is_some()
    }

    pub fn legal_moves(&self) -> Result<Vec<Move>, EnvError> {
        if self.is_terminal() {
            return Err(EnvError::TerminalState);
        }
        Ok(self.moves_for(self.to_move))
    }

    pub fn legal_actions(&self) -> Result<Vec<AgentAction>, EnvError> {
        Ok(self.legal_moves()?.iter().map(Move::action).collect())
    }

    pub fn play(&self, m: &Move) -> BreakthroughBoard {
        let mut next = *self;
        next.grid[m.to] = next.grid[m.from];
        next.grid[m.from] = None;
        next.to_move = self.to_move.opponent();
        next
    }

    pub fn find_move(&self, id: u32) -> Result<Move, EnvError> {
        self.legal_moves()?
            .into_iter()
            .find(|m| m.id() == id)
            .ok_or_else(|| EnvError::IllegalAction(id.to_string()))
    }

    pub fn apply(&self, a: &AgentAction) -> Result<TransitionRecord, EnvError> {
        let m = self.find_move(a.id)?;
        let after = self.play(&m);
        let mover = self.to_move;
        let outcome = after.winner().map(Outcome::Win);
        let reward = match after.winner() {
            Some(w) if w == mover => 1.0,
            Some(_) => -1.0,
            None => 0.0,
        };
        Ok(TransitionRecord {
            state_before: State::Breakthrough(*self),
            action: m.action(),
            reward,
            state_after: State::Breakthrough(after),
            terminal: outcome.is_some(),
            outcome,
        })
    }

    /// Five rank lines (row 5 first) and the " abcde" footer.
    pub fn render(&self) -> String {
        let mut lines = Vec::with_capacity(SIZE + 1);
        for row in (1..=SIZE).rev() {
            let mut line = row.to_string();
            for col in 0..SIZE {
                line.push(match self.grid[square(row, col)] {
                    Some(Player::White) => 'w',
                    Some(Player::Black) => 'b',
                    _ => '.',
                });
            }
            lines.push(line);
        }
        lines.push(" abcde".to_string());
        lines.join("\n")
    }

    /// Grid plus side to move and piece lists, as embedded in prompts.
    pub fn describe(&self) -> String {
        let list = |p: Player| {
            self.pieces(p)
                .into_iter()
                .map(square_name)
                .collect::<Vec<_>>()
                .join(", ")
        };
        format!(
            "{}\n\n It is {}'s turn.\nWhite pieces are at: {}.\nBlack pieces are at: {}.\n",
            self.render(),
            side_name(self.to_move),
            list(Player::White),
            list(Player::Black)
        )
    }

    /// Parses `render` or `describe` output. The side to move comes from the
    /// "It is ...'s turn" line, else from `to_move`.
    pub fn parse(text: &str, to_move: Option<Player>) -> Result<Self, EnvError> {
        let mut grid = [None; 25];
        let mut seen = [false; SIZE + 1];
        let mut turn = to_move;
        for line in text.lines() {
            let t = line.trim();
            if t.contains("It is White's turn") {
                turn = Some(Player::White);
                continue;
            }
            if t.contains("It is Black's turn") {
                turn = Some(Player::Black);
                continue;
            }
            let b = t.as_bytes();
            if b.len() == SIZE + 1 && (b'1'..=b'5').contains(&b[0]) && b[1..].iter().all(|c| b"bw.".contains(c)) {
                let row = (b[0] - b'0') as usize;
                seen[row] = true;
                for col in 0..SIZE {
                    grid[square(row, col)] = match b[col + 1] {
                        b'w' => Some(Player::White),
                        b'b' => Some(Player::Black),
                        _ => None,
                    };
                }
            }
        }
        if !seen[1..].iter().all(|&s| s) {
            return Err(EnvError::InvalidBoard("missing rank lines".into()));
        }
        let to_move = turn.ok_or_else(|| EnvError::InvalidBoard("side to move unknown".into()))?;
        let board = BreakthroughBoard { grid, to_move };
        for p in [Player::White, Player::Black] {
            if board.count(p) > 10 {
                return Err(EnvError::InvalidBoard(format!("{p} has more than 10 pawns")));
            }
        }
        Ok(board)
    }

    pub fn ending_text(&self) -> String {
        match self.winner() {
            Some(w) => format!("The game is over. {} wins.", side_name(w)),
            None => String::new(),
        }
    }
}

pub fn parse_action(legal: &[AgentAction], text: &str) -> Option<AgentAction> {
    let t = text
        .trim()
        .trim_end_matches('.')
        .trim_end_matches('*')
        .to_ascii_lowercase();
    let t: String = t.chars().filter(|c| !matches!(c, '-' | ' ')).collect();
    if let Ok(id) = t.parse::<u32>() {
        return legal.iter().find(|a| a.id == id).cloned();
    }
    legal.iter().find(|a| a.display.trim_end_matches('*') == t).cloned()
}

pub fn describe_transition(
    before: &BreakthroughBoard,
    a: &AgentAction,
    _after: &BreakthroughBoard,
    step: usize,
) -> Result<String, EnvError> {
    let from = (a.id / 25) as usize;
    let to = (a.id % 25) as usize;
    if from >= 25 {
        return Err(EnvError::IllegalAction(a.display.clone()));
    }
    let mover = before.to_move;
    let capture = before.grid[to] == Some(mover.opponent());
    let sq = |s: usize| {
        format!(
            "{} (Column {}, Row {})",
            square_name(s),
            col_letter(col_of(s)),
            row_of(s)
        )
    };
    let mut text = format!(
        "Move {step}:{} moves piece from {} to {}",
        side_name(mover),
        sq(from),
        sq(to)
    );
    if capture {
        text.push_str(&format!(", capturing {} piece", side_name(mover.opponent())));
    }
    text.push('.');
    Ok(text)
}

/// "The action sequence is: d3e4,d5e4*." followed by one line per move.
pub fn describe_sequence(transitions: &[TransitionRecord]) -> Result<String, EnvError> {
    let notation: Vec<&str> = transitions.iter().map(|t| t.action.display.as_str()).collect();
    let mut text = format!("The action sequence is: {}.", notation.join(","));
    for (i, t) in transitions.iter().enumerate() {
        text.push('\n');
        text.push_str(&crate::env_core::render_transition_description(
            t,
            crate::env_core::EnvKind::Breakthrough,
            i + 1,
        )?);
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_core::rng_from;

    /// Enumerates moves square by square straight from the rule text.
    fn rule_enumerator(b: &BreakthroughBoard) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let dir: i32 = if b.to_move == Player::White { 1 } else { -1 };
        for row in 1..=5i32 {
            for col in 0..5i32 {
                if b.grid[square(row as usize, col as usize)] != Some(b.to_move) {
                    continue;
                }
                let tr = row + dir;
                if !(1..=5).contains(&tr) {
                    continue;
                }
                let target = |c: i32| b.grid[square(tr as usize, c as usize)];
                if target(col).is_none() {
                    out.push((
                        format!("{}{}", col_letter(col as usize), row),
                        format!("{}{}", col_letter(col as usize), tr),
                    ));
                }
                for c in [col - 1, col + 1] {
                    if (0..5).contains(&c) && target(c) != Some(b.to_move) {
                        out.push((
                            format!("{}{}", col_letter(col as usize), row),
                            format!("{}{}", col_letter(c as usize), tr),
                        ));
                    }
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn initial_render() {
        let b = BreakthroughBoard::initial();
        assert_eq!(b.render(), "5bbbbb\n4bbbbb\n3.....\n2wwwww\n1wwwww\n abcde");
        assert_eq!(BreakthroughBoard::parse(&b.describe(), None).unwrap(), b);
    }

    #[test]
    fn initial_move_count_matches_rule_enumerator() {
        let b = BreakthroughBoard::initial();
        let moves = b.legal_moves().unwrap();
        let mut pairs: Vec<(String, String)> = moves.iter().map(|m| (square_name(m.from), square_name(m.to))).collect();
        pairs.sort();
        assert_eq!(pairs, rule_enumerator(&b));
        assert_eq!(moves.len(), 13);
    }

    #[test]
    fn random_positions_agree_with_rule_enumerator() {
        let mut rng = rng_from(11);
        for _ in 0..200 {
            let mut b = BreakthroughBoard::initial();
            while !b.is_terminal() {
                let mut pairs: Vec<(String, String)> = b
                    .legal_moves()
                    .unwrap()
                    .iter()
                    .map(|m| (square_name(m.from), square_name(m.to)))
                    .collect();
                pairs.sort();
                assert_eq!(pairs, rule_enumerator(&b));
                let moves = b.legal_moves().unwrap();
                use rand::Rng;
                b = b.play(&moves[rng.gen_range(0..moves.len())]);
            }
        }
    }

    #[test]
    fn square_names_round_trip() {
        for sq in 0..25 {
            assert_eq!(parse_square(&square_name(sq)), Some(sq));
        }
        assert_eq!(square_name(square(3, 3)), "d3");
    }

    #[test]
    fn transition_sentences() {
        let b =
            BreakthroughBoard::parse("5bb.b.\n4b..b.\n3..bw.\n2w.w..\n1wwwww\n abcde", Some(Player::White)).unwrap();
        let legal = b.legal_actions().unwrap();
        let a = parse_action(&legal, "d3e4").unwrap();
        let t1 = b.apply(&a).unwrap();
        let State::Breakthrough(b1) = &t1.state_after else {
            panic!()
        };
        let a2 = parse_action(&b1.legal_actions().unwrap(), "d5e4").unwrap();
        assert_eq!(a2.display, "d5e4*");
        let t2 = b1.apply(&a2).unwrap();
        let text = describe_sequence(&[t1, t2]).unwrap();
        assert_eq!(
            text,
            "The action sequence is: d3e4,d5e4*.\n\
             Move 1:White moves piece from d3 (Column d, Row 3) to e4 (Column e, Row 4).\n\
             Move 2:Black moves piece from d5 (Column d, Row 5) to e4 (Column e, Row 4), capturing White piece."
        );
    }

    #[test]
    fn describe_lists_pieces_top_down() {
        let b =
            BreakthroughBoard::parse("5bb.b.\n4b..b.\n3..bw.\n2w.w..\n1wwwww\n abcde", Some(Player::White)).unwrap();
        assert!(b.describe().ends_with(
            " It is White's turn.\nWhite pieces are at: d3, a2, c2, a1, b1, c1, d1, e1.\nBlack pieces are at: a5, b5, d5, a4, d4, c3.\n"
        ));
    }

    #[test]
    fn reaching_last_row_wins() {
        let b =
            BreakthroughBoard::parse("5.....\n4.....\n3.....\n2b....\n1....w\n abcde", Some(Player::Black)).unwrap();
        let legal = b.legal_actions().unwrap();
        let t = b.apply(&parse_action(&legal, "a2a1").unwrap()).unwrap();
        assert_eq!(t.outcome, Some(Outcome::Win(Player::Black)));
        assert_eq!(t.reward, 1.0);
    }

    #[test]
    fn straight_blocked_by_any_piece() {
        let b =
            BreakthroughBoard::parse("5b....\n4.....\n3.....\n2.....\n1....w\n abcde", Some(Player::White)).unwrap();
        let b = BreakthroughBoard {
            grid: {
                let mut g = b.grid;
                g[square(2, 4)] = Some(Player::Black);
                g
            },
            ..b
        };
        let names: Vec<String> = b.legal_moves().unwrap().iter().map(Move::notation).collect();
        assert_eq!(names, vec!["e1d2"]);
    }
}
