//! Grid mazes with history-bearing text observations. Reward is -1 per step
//! and 0 on the step that reaches the goal.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env_core::{AgentAction, EnvError, Outcome, State, TransitionRecord};

pub const DEFAULT_STEP_CAP: u16 = 50;

const ACTIONS: [&str; 4] = ["move up", "move down", "move left", "move right"];

const BUILTIN: [(&str, &str); 3] = [
    ("toy", include_str!("../../layouts/toy.txt")),
    ("double_t", include_str!("../../layouts/double_t.txt")),
    ("medium", include_str!("../../layouts/medium.txt")),
];

pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MazeLayout {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub walls: Vec<bool>,
    pub goal: Cell,
}

impl MazeLayout {
    pub fn parse(name: &str, text: &str) -> Result<Self, EnvError> {
        let lines: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let rows = lines.len();
        let cols = lines.first().map_or(0, |l| l.chars().count());
        if rows == 0 || lines.iter().any(|l| l.chars().count() != cols) {
            return Err(EnvError::Layout(format!(
                "{name}: rows must be non-empty and equal length"
            )));
        }
        let mut walls = Vec::with_capacity(rows * cols);
        let mut goal = None;
        for (r, line) in lines.iter().enumerate() {
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'G' => {
                        if goal.replace((r, c)).is_some() {
                            return Err(EnvError::Layout(format!("{name}: more than one goal")));
                        }
                        walls.push(false);
                    }
                    other => return Err(EnvError::Layout(format!("{name}: unknown symbol `{other}`"))),
                }
            }
        }
        let goal = goal.ok_or_else(|| EnvError::Layout(format!("{name}: no goal")))?;
        Ok(MazeLayout {
            name: name.to_string(),
            rows,
            cols,
            walls,
            goal,
        })
    }

    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, text)| Self::parse(n, text).expect("shipped layouts are valid"))
    }

    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    /// Resolves a built-in name or a path to a layout file.
    pub fn load(name_or_path: &str) -> Result<Self, EnvError> {
        if let Some(l) = Self::builtin(name_or_path) {
            return Ok(l);
        }
        let path = Path::new(name_or_path);
        let text = std::fs::read_to_string(path).map_err(|e| EnvError::Layout(format!("{name_or_path}: {e}")))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(name_or_path);
        Self::parse(stem, &text)
    }

    pub fn is_wall(&self, r: isize, c: isize) -> bool {
        if r < 0 || c < 0 || r as usize >= self.rows || c as usize >= self.cols {
            return true;
        }
        self.walls[r as usize * self.cols + c as usize]
    }

    /// Non-wall cells other than the goal, row-major.
    pub fn start_cells(&self) -> Vec<Cell> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.walls[r * self.cols + c] && (r, c) != self.goal)
            .collect()
    }

    pub fn step(&self, from: Cell, action_id: u32) -> Cell {
        let (dr, dc) = delta(action_id);
        let (nr, nc) = (from.0 as isize + dr, from.1 as isize + dc);
        if self.is_wall(nr, nc) {
            from
        } else {
            (nr as usize, nc as usize)
        }
    }

    /// Shortest path lengths to the goal; `None` for walls and unreachable cells.
    pub fn distances(&self) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.rows * self.cols];
        let idx = |(r, c): Cell| r * self.cols + c;
        dist[idx(self.goal)] = Some(0);
        let mut queue = VecDeque::from([self.goal]);
        while let Some(cell) = queue.pop_front() {
            let d = dist[idx(cell)].expect("queued cells have distances");
            for a in 1..=4 {
                let n = self.step(cell, a);
                if n != cell && dist[idx(n)].is_none() {
                    dist[idx(n)] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    pub fn distance(&self, cell: Cell) -> Option<u32> {
        self.distances()[cell.0 * self.cols + cell.1]
    }

    /// Observation sentence for an agent standing at `cell`.
    pub fn observe(&self, cell: Cell) -> String {
        let (r, c) = (cell.0 as isize, cell.1 as isize);
        let mut walls = Vec::new();
        for (dr, dc, text) in [
            (-1, 0, "above you"),
            (0, -1, "to your left"),
            (0, 1, "to your right"),
            (1, 0, "below you"),
        ] {
            if self.is_wall(r + dr, c + dc) {
                walls.push(text);
            }
        }
        let wall_text = if walls.is_empty() {
            "There are no walls around you.".to_string()
        } else {
            format!("There are walls {}.", walls.join(", "))
        };
        format!(
            "The goal is at position {}, {}. Your current position is at position {}, {}. {}",
            self.goal.0, self.goal.1, cell.0, cell.1, wall_text
        )
    }
}

fn delta(action_id: u32) -> (isize, isize) {
    match action_id {
        1 => (-1, 0),
        2 => (1, 0),
        3 => (0, -1),
        _ => (0, 1),
    }
}

pub fn action(id: u32) -> AgentAction {
    AgentAction::new(id, ACTIONS[(id - 1) as usize])
}

pub fn all_actions() -> Vec<AgentAction> {
    (1..=4).map(action).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MazeWorld {
    pub layout: Arc<MazeLayout>,
    pub start: Cell,
    pub agent: Cell,
    pub move_history: Vec<u32>,
    pub step_cap: u16,
}

impl MazeWorld {
    pub fn new(layout: Arc<MazeLayout>, start: Cell, step_cap: u16) -> Result<Self, EnvError> {
        if layout.is_wall(start.0 as isize, start.1 as isize) {
            return Err(EnvError::Layout(format!("start {start:?} is a wall")));
        }
        Ok(MazeWorld {
            layout,
            start,
            agent: start,
            move_history: Vec::new(),
            step_cap,
        })
    }

    pub fn goal(&self) -> Cell {
        self.layout.goal
    }

    pub fn at_goal(&self) -> bool {
        self.agent == self.layout.goal
    }

    pub fn is_terminal(&self) -> bool {
        self.at_goal() || self.move_history.len() >= self.step_cap as usize
    }

    pub fn legal_actions(&self) -> Result<Vec<AgentAction>, EnvError> {
        if self.is_terminal() {
            return Err(EnvError::TerminalState);
        }
        Ok(all_actions())
    }

    pub fn apply(&self, a: &AgentAction) -> Result<TransitionRecord, EnvError> {
        if self.is_terminal() {
            return Err(EnvError::TerminalState);
        }
        if !(1..=4).contains(&a.id) {
            return Err(EnvError::IllegalAction(a.display.clone()));
        }
        let mut after = self.clone();
        after.agent = self.layout.step(self.agent, a.id);
        after.move_history.push(a.id);
        let outcome = if after.at_goal() {
            Some(Outcome::Success)
        } else if after.is_terminal() {
            Some(Outcome::Fail)
        } else {
            None
        };
        Ok(TransitionRecord {
            state_before: State::Maze(self.clone()),
            action: action(a.id),
            reward: if after.at_goal() { 0.0 } else { -1.0 },
            state_after: State::Maze(after),
            terminal: outcome.is_some(),
            outcome,
        })
    }

    pub fn observation(&self) -> String {
        self.layout.observe(self.agent)
    }

    /// Observation, move, observation, ... from the start to the current cell.
    pub fn render_history(&self) -> String {
        let mut cell = self.start;
        let mut lines = vec![self.layout.observe(cell)];
        for &a in &self.move_history {
            cell = self.layout.step(cell, a);
            lines.push(ACTIONS[(a - 1) as usize].to_string());
            lines.push(self.layout.observe(cell));
        }
        lines.join("\n")
    }

    pub fn ending_text(&self) -> String {
        if self.at_goal() {
            "The agent has reached the goal.".into()
        } else {
            "The agent has used up all moves without reaching the goal.".into()
        }
    }
}

pub fn parse_action(legal: &[AgentAction], text: &str) -> Option<AgentAction> {
    let t = text
        .trim()
        .trim_matches('"')
        .trim()
        .trim_end_matches('.')
        .to_ascii_lowercase();
    if let Ok(id) = t.parse::<u32>() {
        return legal.iter().find(|a| a.id == id).cloned();
    }
    let t = t.strip_prefix("move ").unwrap_or(&t);
    legal
        .iter()
        .find(|a| a.display.strip_prefix("move ") == Some(t))
        .cloned()
}

pub fn describe_transition(a: &AgentAction, after: &MazeWorld) -> String {
    format!("{}\n{}", a.display, after.observation())
}

/// Extracts the last "Your current position is at position r, c" from text.
pub fn parse_position(text: &str) -> Option<Cell> {
    let key = "Your current position is at position ";
    let start = text.rfind(key)? + key.len();
    parse_pair(&text[start..])
}

pub fn parse_goal(text: &str) -> Option<Cell> {
    let key = "The goal is at position ";
    let start = text.rfind(key)? + key.len();
    parse_pair(&text[start..])
}

fn parse_pair(s: &str) -> Option<Cell> {
    let mut nums = s.split(|c: char| !c.is_ascii_digit()).filter(|p| !p.is_empty());
    let r = nums.next()?.parse().ok()?;
    let c = nums.next()?.parse().ok()?;
    Some((r, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_t() -> Arc<MazeLayout> {
        Arc::new(MazeLayout::builtin("double_t").unwrap())
    }

    #[test]
    fn observation_sentences() {
        let l = double_t();
        assert_eq!(
            l.observe((5, 7)),
            "The goal is at position 8, 6. Your current position is at position 5, 7. There are walls above you, below you."
        );
        assert_eq!(
            l.observe((5, 9)),
            "The goal is at position 8, 6. Your current position is at position 5, 9. There are walls to your right, below you."
        );
    }

    #[test]
    fn blocked_move_is_recorded() {
        let m = MazeWorld::new(double_t(), (5, 7), DEFAULT_STEP_CAP).unwrap();
        let t = m.apply(&action(1)).unwrap();
        let State::Maze(after) = &t.state_after else { panic!() };
        assert_eq!(after.agent, m.agent);
        assert_eq!(after.move_history, vec![1]);
        assert_eq!(t.reward, -1.0);
        assert_eq!(
            after.render_history(),
            "The goal is at position 8, 6. Your current position is at position 5, 7. There are walls above you, below you.\n\
             move up\n\
             The goal is at position 8, 6. Your current position is at position 5, 7. There are walls above you, below you."
        );
    }

    #[test]
    fn reaching_goal() {
        let m = MazeWorld::new(double_t(), (7, 6), DEFAULT_STEP_CAP).unwrap();
        let t = m.apply(&action(2)).unwrap();
        assert!(t.terminal);
        assert_eq!(t.reward, 0.0);
        assert_eq!(t.outcome, Some(Outcome::Success));
    }

    #[test]
    fn builtin_layouts_are_connected() {
        for name in MazeLayout::builtin_names() {
            let l = MazeLayout::builtin(name).unwrap();
            for cell in l.start_cells() {
                assert!(l.distance(cell).is_some(), "{name} {cell:?} unreachable");
            }
        }
        assert_eq!(double_t().start_cells().len(), 30);
    }

    #[test]
    fn step_cap() {
        let mut m = MazeWorld::new(double_t(), (1, 1), 2).unwrap();
        for _ in 0..2 {
            let t = m.apply(&action(1)).unwrap();
            let State::Maze(next) = t.state_after else { panic!() };
            m = next;
        }
        assert!(m.is_terminal());
        assert!(matches!(m.legal_actions(), Err(EnvError::TerminalState)));
    }

    #[test]
    fn positions_parse_back() {
        let l = double_t();
        let text = l.observe((5, 9));
        assert_eq!(parse_position(&text), Some((5, 9)));
        assert_eq!(parse_goal(&text), Some((8, 6)));
    }

    #[test]
    fn action_parse() {
        let legal = all_actions();
        assert_eq!(parse_action(&legal, "move left").unwrap().id, 3);
        assert_eq!(parse_action(&legal, "\"move right\"").unwrap().id, 4);
        assert_eq!(parse_action(&legal, "down").unwrap().id, 2);
    }

    #[test]
    fn bad_layouts() {
        assert!(MazeLayout::parse("x", "..\n..").is_err());
        assert!(MazeLayout::parse("x", "G.\nG.").is_err());
        assert!(MazeLayout::parse("x", "G.\n...").is_err());
    }
}
