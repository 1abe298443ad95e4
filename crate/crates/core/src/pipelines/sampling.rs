//! Policy sampling: action masks and episode collection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::env_core::{derive_seed, rng_from, AgentAction, Player, State, Trajectory};
use crate::environments::{opponent_move, uniform_random, OpponentKind};
use crate::lm_backend::Backend;
use crate::value_ops::ValueOps;

use super::PipelineError;

/// Actions seen in policy samples, most frequent first (ties: lower id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMask {
    pub candidates: Vec<(AgentAction, u32)>,
    pub m: usize,
    /// Every sample was unusable; all legal actions are kept.
    pub fallback: bool,
}

impl ActionMask {
    pub fn kept(&self) -> &[(AgentAction, u32)] {
        if self.fallback {
            &self.candidates
        } else {
            &self.candidates[..self.m.min(self.candidates.len())]
        }
    }

    pub fn kept_actions(&self) -> Vec<AgentAction> {
        self.kept().iter().map(|(a, _)| a.clone()).collect()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.kept().iter().any(|(a, _)| a.id == id)
    }

    /// Orders raw samples into a mask; `None` entries are abstentions.
    pub fn from_samples(samples: &[Option<AgentAction>], legal: &[AgentAction], m: usize) -> ActionMask {
        let mut counts: BTreeMap<u32, (AgentAction, u32)> = BTreeMap::new();
        for a in samples.iter().flatten() {
            counts.entry(a.id).or_insert_with(|| (a.clone(), 0)).1 += 1;
        }
        if counts.is_empty() {
            return ActionMask {
                candidates: legal.iter().map(|a| (a.clone(), 0)).collect(),
                m,
                fallback: true,
            };
        }
        let mut candidates: Vec<(AgentAction, u32)> = counts.into_values().collect();
        candidates.sort_by(|(a, x), (b, y)| y.cmp(x).then(a.id.cmp(&b.id)));
        ActionMask {
            candidates,
            m,
            fallback: false,
        }
    }
}

/// Draws `n_sample` policy replies at `state` with seeds derived from `seed`.
pub fn select_action_candidates(
    state: &State,
    policy: &dyn Backend,
    ops: &ValueOps,
    n_sample: usize,
    m: usize,
    seed: u64,
) -> Result<ActionMask, PipelineError> {
    if n_sample == 0 || m == 0 {
        return Err(PipelineError::Config("n_sample and m must be positive".into()));
    }
    let legal = state.legal_actions()?;
    let samples = (0..n_sample)
        .map(|k| Ok(ops.policy_move(state, policy, derive_seed(seed, &[k as u64]))?.action))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(ActionMask::from_samples(&samples, &legal, m))
}

/// An episode played by the language policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub agent: Player,
    /// Agent moves whose reply named no legal move.
    pub parse_failures: usize,
    pub agent_moves: usize,
}

/// Plays one episode from `start`: the policy backend moves for `agent`,
/// `opponent` for the other seat. Unusable replies become uniform random
/// moves. Single-agent environments ignore `opponent`.
pub fn play_episode(
    start: &State,
    agent: Player,
    policy: &dyn Backend,
    ops: &ValueOps,
    opponent: &OpponentKind,
    seed: u64,
) -> Result<Episode, PipelineError> {
    let mut rng = rng_from(seed);
    let mut traj = Trajectory::new(seed);
    let mut state = start.clone();
    let (mut parse_failures, mut agent_moves) = (0, 0);
    let two_player = state.kind().is_two_player();
    while !state.is_terminal() {
        let ply = traj.len() as u64;
        let action = if !two_player || state.mover() == agent {
            agent_moves += 1;
            match ops.policy_move(&state, policy, derive_seed(seed, &[ply]))?.action {
                Some(a) => a,
                None => {
                    parse_failures += 1;
                    uniform_random(&state, &mut rng)?
                }
            }
        } else {
            opponent_move(opponent, &state, &mut rng)?
        };
        let t = state.apply(&action, &mut rng)?;
        state = t.state_after.clone();
        traj.transitions.push(t);
    }
    Ok(Episode {
        trajectory: traj,
        agent,
        parse_failures,
        agent_moves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_core::EnvKind;
    use crate::environments::tictactoe::TicTacToeBoard;
    use crate::lm_backend::{OracleBackend, OracleOptions};
    use crate::oracles::minimax::minimax;
    use crate::prompt_kit::TemplateRegistry;

    fn ids(samples: &[u32]) -> Vec<Option<AgentAction>> {
        samples
            .iter()
            .map(|&i| Some(AgentAction::new(i, i.to_string())))
            .collect()
    }

    fn legal() -> Vec<AgentAction> {
        (1..=9).map(|i| AgentAction::new(i, i.to_string())).collect()
    }

    #[test]
    fn all_same_sample() {
        let m = ActionMask::from_samples(&ids(&[9; 10]), &legal(), 10);
        assert_eq!(m.kept(), &[(AgentAction::new(9, "9"), 10)]);
    }

    #[test]
    fn frequency_order_and_cutoff() {
        let mut s = ids(&[7; 6]);
        s.extend(ids(&[3; 4]));
        let m = ActionMask::from_samples(&s, &legal(), 1);
        assert_eq!(m.kept(), &[(AgentAction::new(7, "7"), 6)]);
        let m = ActionMask::from_samples(&ids(&[5, 2, 5, 2, 8]), &legal(), 10);
        let order: Vec<u32> = m.kept().iter().map(|(a, _)| a.id).collect();
        assert_eq!(order, [2, 5, 8]);
    }

    #[test]
    fn all_abstentions_keep_legal() {
        let m = ActionMask::from_samples(&[None, None], &legal(), 3);
        assert!(m.fallback);
        assert_eq!(m.kept().len(), 9);
    }

    #[test]
    fn oracle_mask_is_optimal() {
        let b = TicTacToeBoard::from_positions(&[1, 5], &[9, 2]).unwrap();
        let s = State::TicTacToe(b);
        let oracle = OracleBackend::new(EnvKind::TicTacToe, OracleOptions::default()).unwrap();
        let ops = ValueOps::new(TemplateRegistry::builtin());
        let mask = select_action_candidates(&s, &oracle, &ops, 10, 10, 0).unwrap();
        let best: Vec<u32> = minimax(&b).unwrap().optimal_actions.iter().map(|a| a.id).collect();
        assert!(
            mask.kept().iter().all(|(a, _)| best.contains(&a.id)),
            "{mask:?} vs {best:?}"
        );
    }

    #[test]
    fn episodes_are_seeded() {
        let oracle = OracleBackend::new(EnvKind::TicTacToe, OracleOptions::default()).unwrap();
        let ops = ValueOps::new(TemplateRegistry::builtin());
        let s = State::TicTacToe(TicTacToeBoard::empty());
        let a = play_episode(&s, Player::O, &oracle, &ops, &OpponentKind::UniformRandom, 5).unwrap();
        let b = play_episode(&s, Player::O, &oracle, &ops, &OpponentKind::UniformRandom, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.trajectory.is_well_formed());
        assert!(a.trajectory.final_state().unwrap().is_terminal());
        assert_eq!(a.parse_failures, 0);
    }
}
