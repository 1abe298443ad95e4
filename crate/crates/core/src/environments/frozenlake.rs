//! 4x4 FrozenLake. Actions 1:Left, 2:Down, 3:Right, 4:Up. In slippery mode
//! the intended direction and each perpendicular one are taken with
//! probability 1/3.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env_core::{AgentAction, EnvError, Outcome, Rng, State, TransitionRecord};

pub const SIDE: usize = 4;
pub const DEFAULT_STEP_CAP: u16 = 16;
pub const DEFAULT_LAYOUT: &str = "_GO_\n____\nPO__\n____";

const NAMES: [&str; 4] = ["Left", "Down", "Right", "Up"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tile {
    Empty,
    Hole,
    Goal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrozenLakeGrid {
    pub layout: [Tile; 16],
    pub player: u8,
    pub slippery: bool,
    pub step_count: u16,
    pub step_cap: u16,
}

pub fn action(id: u32) -> AgentAction {
    AgentAction::new(id, format!("{id} ({})", NAMES[(id - 1) as usize]))
}

pub fn all_actions() -> Vec<AgentAction> {
    (1..=4).map(action).collect()
}

/// Intended direction followed by its two perpendiculars.
pub fn slip_candidates(id: u32) -> [u32; 3] {
    let g = (id - 1) as i32;
    [
        g as u32 + 1,
        (g - 1).rem_euclid(4) as u32 + 1,
        (g + 1).rem_euclid(4) as u32 + 1,
    ]
}

impl FrozenLakeGrid {
    /// Parses a map drawn with P,_,O,G (X and √ accepted for a player on a
    /// hole or goal).
    pub fn parse(text: &str, slippery: bool, step_cap: u16) -> Result<Self, EnvError> {
        let rows: Vec<Vec<char>> = text
            .trim()
            .trim_end_matches('.')
            .lines()
            .map(|l| l.trim().chars().collect::<Vec<_>>())
            .filter(|r| !r.is_empty())
            .collect();
        if rows.len() != SIDE || rows.iter().any(|r| r.len() != SIDE) {
            return Err(EnvError::Layout("expected a 4x4 grid".into()));
        }
        let mut layout = [Tile::Empty; 16];
        let mut player = None;
        for (r, row) in rows.iter().enumerate() {
            for (c, ch) in row.iter().enumerate() {
                let i = r * SIDE + c;
                layout[i] = match ch {
                    '_' | 'P' => Tile::Empty,
                    'O' | 'X' => Tile::Hole,
                    'G' | '√' => Tile::Goal,
                    other => return Err(EnvError::Layout(format!("unknown symbol `{other}`"))),
                };
                if matches!(ch, 'P' | 'X' | '√') {
                    if player.is_some() {
                        return Err(EnvError::Layout("more than one player".into()));
                    }
                    player = Some(i as u8);
                }
            }
        }
        if layout.iter().filter(|t| **t == Tile::Goal).count() != 1 {
            return Err(EnvError::Layout("exactly one goal required".into()));
        }
        let player = player.ok_or_else(|| EnvError::Layout("no player".into()))?;
        Ok(FrozenLakeGrid {
            layout,
            player,
            slippery,
            step_count: 0,
            step_cap,
        })
    }

    pub fn tile(&self, i: usize) -> Tile {
        self.layout[i]
    }

    pub fn goal(&self) -> usize {
        self.layout.iter().position(|t| *t == Tile::Goal).expect("validated")
    }

    pub fn in_hole(&self) -> bool {
        self.layout[self.player as usize] == Tile::Hole
    }

    pub fn on_goal(&self) -> bool {
        self.layout[self.player as usize] == Tile::Goal
    }

    pub fn out_of_steps(&self) -> bool {
        self.step_count >= self.step_cap
    }

    pub fn is_terminal(&self) -> bool {
        self.in_hole() || self.on_goal() || self.out_of_steps()
    }

    pub fn legal_actions(&self) -> Result<Vec<AgentAction>, EnvError> {
        if self.is_terminal() {
            return Err(EnvError::TerminalState);
        }
        Ok(all_actions())
    }

    /// Cell reached by moving from `from` in direction `id`; walls keep the player in place.
    pub fn displaced(from: usize, id: u32) -> usize {
        let (r, c) = ((from / SIDE) as i32, (from % SIDE) as i32);
        let (nr, nc) = match id {
            1 => (r, c - 1),
            2 => (r + 1, c),
            3 => (r, c + 1),
            _ => (r - 1, c),
        };
        if (0..SIDE as i32).contains(&nr) && (0..SIDE as i32).contains(&nc) {
            (nr as usize) * SIDE + nc as usize
        } else {
            from
        }
    }

    /// Direction actually taken for intended direction `id`.
    pub fn sample_direction(&self, id: u32, rng: &mut Rng) -> u32 {
        if self.slippery {
            slip_candidates(id)[rng.gen_range(0..3)]
        } else {
            id
        }
    }

    pub fn step_with_direction(&self, dir: u32) -> FrozenLakeGrid {
        let mut next = *self;
        next.player = Self::displaced(self.player as usize, dir) as u8;
        next.step_count += 1;
        next
    }

    pub fn apply(&self, a: &AgentAction, rng: &mut Rng) -> Result<TransitionRecord, EnvError> {
        if self.is_terminal() {
            return Err(EnvError::TerminalState);
        }
        if !(1..=4).contains(&a.id) {
            return Err(EnvError::IllegalAction(a.display.clone()));
        }
        let dir = self.sample_direction(a.id, rng);
        let after = self.step_with_direction(dir);
        let outcome = if after.on_goal() {
            Some(Outcome::Success)
        } else if after.in_hole() || after.out_of_steps() {
            Some(Outcome::Fail)
        } else {
            None
        };
        Ok(TransitionRecord {
            state_before: State::FrozenLake(*self),
            action: action(a.id),
            reward: if after.on_goal() { 1.0 } else { 0.0 },
            state_after: State::FrozenLake(after),
            terminal: outcome.is_some(),
            outcome,
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in 0..SIDE {
            if r > 0 {
                out.push('\n');
            }
            for c in 0..SIDE {
                let i = r * SIDE + c;
                let here = i == self.player as usize;
                out.push(match (self.layout[i], here) {
                    (Tile::Hole, true) => 'X',
                    (Tile::Goal, true) => '√',
                    (_, true) => 'P',
                    (Tile::Empty, false) => '_',
                    (Tile::Hole, false) => 'O',
                    (Tile::Goal, false) => 'G',
                });
            }
        }
        out
    }

    /// Shortest number of moves to the goal avoiding holes, if reachable.
    pub fn distance_to_goal(&self) -> Option<u32> {
        let goal = self.goal();
        let mut dist = [u32::MAX; 16];
        let mut queue = std::collections::VecDeque::from([goal]);
        dist[goal] = 0;
        while let Some(cell) = queue.pop_front() {
            for dir in 1..=4 {
                let n = Self::displaced(cell, dir);
                if n != cell && dist[n] == u32::MAX && self.layout[n] != Tile::Hole {
                    dist[n] = dist[cell] + 1;
                    queue.push_back(n);
                }
            }
        }
        let d = dist[self.player as usize];
        (d != u32::MAX).then_some(d)
    }

    pub fn ending_text(&self) -> String {
        if self.in_hole() {
            "The game is over. Player fall into the hole and therefore fails.".into()
        } else if self.on_goal() {
            "The game is over. Player reaches the goal and therefore succeeds.".into()
        } else {
            "The game is over. Player has reach maximum number of move and therefore fails.".into()
        }
    }
}

pub fn parse_action(legal: &[AgentAction], text: &str) -> Option<AgentAction> {
    let t = text.trim().trim_end_matches('.');
    let id = t
        .split(|c: char| !c.is_ascii_alphanumeric())
        .find(|s| !s.is_empty())
        .and_then(|head| {
            head.parse::<u32>().ok().or_else(|| {
                NAMES
                    .iter()
                    .position(|n| n.eq_ignore_ascii_case(head))
                    .map(|i| i as u32 + 1)
            })
        })?;
    legal.iter().find(|a| a.id == id).cloned()
}

pub fn describe_transition(a: &AgentAction, after: &FrozenLakeGrid) -> String {
    format!(
        "After taking action {}, the board position is\n{}.",
        a.id,
        after.render()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_core::{render_transition_description, rng_from, EnvKind};

    fn grid(text: &str) -> FrozenLakeGrid {
        FrozenLakeGrid::parse(text, false, DEFAULT_STEP_CAP).unwrap()
    }

    #[test]
    fn renders_symbols() {
        let g = grid(DEFAULT_LAYOUT);
        assert_eq!(g.render(), "_GO_\n____\nPO__\n____");
        assert_eq!(FrozenLakeGrid::parse(&g.render(), false, 16).unwrap(), g);
    }

    #[test]
    fn falling_and_goal_symbols() {
        let g = grid("____\nPO__\n____\nG___");
        let mut rng = rng_from(0);
        let t = g.apply(&action(3), &mut rng).unwrap();
        let State::FrozenLake(after) = &t.state_after else {
            panic!()
        };
        assert_eq!(after.render(), "____\n_X__\n____\nG___");
        assert_eq!(t.outcome, Some(Outcome::Fail));
        assert_eq!(
            after.ending_text(),
            "The game is over. Player fall into the hole and therefore fails."
        );
        let g = grid("____\n____\nP___\nG___");
        let t = g.apply(&action(2), &mut rng).unwrap();
        assert_eq!(t.state_after.text(), "____\n____\n____\n√___");
        assert_eq!(t.reward, 1.0);
        assert_eq!(t.outcome, Some(Outcome::Success));
    }

    #[test]
    fn walls_keep_position() {
        let g = grid("P___\n____\n____\n___G");
        let mut rng = rng_from(0);
        let t = g.apply(&action(4), &mut rng).unwrap();
        let State::FrozenLake(after) = t.state_after else {
            panic!()
        };
        assert_eq!(after.player, 0);
        assert_eq!(after.step_count, 1);
    }

    #[test]
    fn step_cap_ends_episode() {
        let mut g = grid("P___\n____\n____\n___G");
        g.step_cap = 2;
        let mut rng = rng_from(0);
        let t = g.apply(&action(1), &mut rng).unwrap();
        assert!(!t.terminal);
        let State::FrozenLake(g1) = t.state_after else { panic!() };
        let t = g1.apply(&action(1), &mut rng).unwrap();
        assert!(t.terminal);
        assert_eq!(
            t.state_after.ending_text().unwrap(),
            "The game is over. Player has reach maximum number of move and therefore fails."
        );
    }

    #[test]
    fn always_four_actions() {
        let ids: Vec<u32> = grid(DEFAULT_LAYOUT)
            .legal_actions()
            .unwrap()
            .iter()
            .map(|a| a.id)
            .collect();
        assert_eq!(ids, vec![1, 2, 3, 4]);
        assert_eq!(action(2).display, "2 (Down)");
    }

    #[test]
    fn slip_candidates_are_perpendicular() {
        assert_eq!(slip_candidates(2), [2, 1, 3]);
        assert_eq!(slip_candidates(1), [1, 4, 2]);
        assert_eq!(slip_candidates(4), [4, 3, 1]);
    }

    #[test]
    fn transition_text() {
        let g = grid("_OO_\nG___\n____\n_OOP");
        let mut rng = rng_from(3);
        let t = g.apply(&action(2), &mut rng).unwrap();
        assert_eq!(
            render_transition_description(&t, EnvKind::FrozenLake, 1).unwrap(),
            "After taking action 2, the board position is\n_OO_\nG___\n____\n_OOP."
        );
    }

    #[test]
    fn action_parsing() {
        let legal = all_actions();
        assert_eq!(parse_action(&legal, "2 (Down)").unwrap().id, 2);
        assert_eq!(parse_action(&legal, "up").unwrap().id, 4);
        assert_eq!(parse_action(&legal, "3").unwrap().id, 3);
        assert!(parse_action(&legal, "5").is_none());
    }

    #[test]
    fn distance() {
        let g = grid(DEFAULT_LAYOUT);
        assert_eq!(g.distance_to_goal(), Some(3));
    }
}
