//! UCT Monte-Carlo tree search with uniform-random playouts.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{random_playout, OracleError};
use crate::env_core::{AgentAction, EnvError, Player, Rng, State};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MctsConfig {
    pub uct_c: f64,
    pub simulations: u32,
    pub rollouts_per_eval: u32,
    pub seed: u64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig {
            uct_c: 1.0,
            simulations: 1000,
            rollouts_per_eval: 100,
            seed: 0,
        }
    }
}

impl MctsConfig {
    pub fn new(simulations: u32, rollouts_per_eval: u32) -> Self {
        MctsConfig {
            simulations,
            rollouts_per_eval,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if !(self.uct_c > 0.0) || self.simulations == 0 || self.rollouts_per_eval == 0 {
            return Err(OracleError::Config("mcts parameters must be positive".into()));
        }
        Ok(())
    }
}

struct Node {
    state: State,
    action: Option<AgentAction>,
    parent: Option<usize>,
    children: Vec<usize>,
    untried: Vec<AgentAction>,
    visits: u32,
    /// Accumulated score for the side that moved into this node.
    score: f64,
}

/// Per-side score of a finished game: 1 win, 0.5 draw, 0 loss.
fn score_for(winner: Option<Player>, side: Player) -> f64 {
    match winner {
        Some(w) if w == side => 1.0,
        Some(_) => 0.0,
        None => 0.5,
    }
}

fn terminal_winner(state: &State) -> Option<Player> {
    match state {
        State::TicTacToe(b) => b.winner().map(|(p, _)| p),
        State::Breakthrough(b) => b.winner(),
        _ => None,
    }
}

/// Runs `cfg.simulations` UCT iterations and returns the most visited root
/// child. Visit ties go to the lowest action id.
pub fn mcts_select(state: &State, cfg: &MctsConfig, rng: &mut Rng) -> Result<AgentAction, OracleError> {
    cfg.validate()?;
    if !state.kind().is_two_player() {
        return Err(OracleError::Unsupported(state.kind()));
    }
    if state.is_terminal() {
        return Err(OracleError::Env(EnvError::TerminalState));
    }
    let mut root_untried = state.legal_actions()?;
    root_untried.shuffle(rng);
    let mut nodes = vec![Node {
        state: state.clone(),
        action: None,
        parent: None,
        children: Vec::new(),
        untried: root_untried,
        visits: 0,
        score: 0.0,
    }];

    for _ in 0..cfg.simulations {
        // Selection.
        let mut cur = 0;
        while nodes[cur].untried.is_empty() && !nodes[cur].children.is_empty() {
            let ln_n = f64::from(nodes[cur].visits.max(1)).ln();
            let mut best = nodes[cur].children[0];
            let mut best_u = f64::NEG_INFINITY;
            for &ch in &nodes[cur].children {
                let n = &nodes[ch];
                let u = n.score / f64::from(n.visits) + cfg.uct_c * (ln_n / f64::from(n.visits)).sqrt();
                if u > best_u {
                    best_u = u;
                    best = ch;
                }
            }
            cur = best;
        }
        // Expansion.
        if let Some(a) = nodes[cur].untried.pop() {
            let next = nodes[cur].state.apply(&a, rng)?.state_after;
            let mut untried = if next.is_terminal() {
                Vec::new()
            } else {
                next.legal_actions()?
            };
            untried.shuffle(rng);
            nodes.push(Node {
                state: next,
                action: Some(a),
                parent: Some(cur),
                children: Vec::new(),
                untried,
                visits: 0,
                score: 0.0,
            });
            let id = nodes.len() - 1;
            nodes[cur].children.push(id);
            cur = id;
        }
        // Evaluation.
        let leaf = &nodes[cur].state;
        let mut results: Vec<Option<Player>> = Vec::new();
        if leaf.is_terminal() {
            results.push(terminal_winner(leaf));
        } else {
            for _ in 0..cfg.rollouts_per_eval {
                results.push(random_playout(leaf, rng)?);
            }
        }
        let n = results.len() as f64;
        // Backpropagation.
        let mut at = Some(cur);
        while let Some(i) = at {
            let parent = nodes[i].parent;
            nodes[i].visits += 1;
            if let Some(p) = parent {
                let mover = nodes[p].state.mover();
                let s: f64 = results.iter().map(|w| score_for(*w, mover)).sum::<f64>() / n;
                nodes[i].score += s;
            }
            at = parent;
        }
    }

    let best = nodes[0]
        .children
        .iter()
        .map(|&c| &nodes[c])
        .max_by(|a, b| {
            let (aa, ba) = (a.action.as_ref().unwrap(), b.action.as_ref().unwrap());
            a.visits.cmp(&b.visits).then(ba.id.cmp(&aa.id))
        })
        .and_then(|n| n.action.clone());
    match best {
        Some(a) => Ok(a),
        // Zero simulations never happen after validation; keep a total fallback.
        None => {
            let legal = state.legal_actions()?;
            Ok(legal[rng.gen_range(0..legal.len())].clone())
        }
    }
}
