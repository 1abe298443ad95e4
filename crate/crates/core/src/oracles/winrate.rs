//! Monte-Carlo win-rate estimation and advantage labels.

use serde::{Deserialize, Serialize};

use super::{random_playout, OracleError, PLAYOUT_CAP};
use crate::env_core::{derive_seed, rng_from, Player, Rng, State};
use crate::environments::{opponent_move, OpponentKind};
use crate::util::stable_hash;

pub const DEFAULT_THRESHOLD: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageSide {
    White,
    Black,
    None,
}

impl AdvantageSide {
    pub fn tag(self) -> &'static str {
        match self {
            AdvantageSide::White => "<white>",
            AdvantageSide::Black => "<black>",
            AdvantageSide::None => "",
        }
    }
}

/// Persisted as one JSONL line of the breakthrough test-set label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageLabel {
    pub state_text: String,
    pub winrate_white: f64,
    pub n_rollouts: u32,
    pub threshold: f64,
    pub side: AdvantageSide,
}

/// Policies for the two seats. For tic-tac-toe, `white` plays O.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPair {
    pub white: OpponentKind,
    pub black: OpponentKind,
}

impl PolicyPair {
    pub fn random() -> Self {
        PolicyPair {
            white: OpponentKind::UniformRandom,
            black: OpponentKind::UniformRandom,
        }
    }
}

/// White in Breakthrough, O in tic-tac-toe.
pub fn is_white_seat(p: Player) -> bool {
    matches!(p, Player::White | Player::O)
}

pub fn side_from_winrate(winrate_white: f64, threshold: f64) -> AdvantageSide {
    if winrate_white > threshold {
        AdvantageSide::White
    } else if 1.0 - winrate_white > threshold {
        AdvantageSide::Black
    } else {
        AdvantageSide::None
    }
}

fn play_game(state: &State, pair: &PolicyPair, rng: &mut Rng) -> Result<Option<Player>, OracleError> {
    if pair.white == OpponentKind::UniformRandom && pair.black == OpponentKind::UniformRandom {
        return match random_playout(state, rng) {
            Err(OracleError::NonterminatingGame(_)) => Ok(None),
            other => other,
        };
    }
    let mut s = state.clone();
    for _ in 0..PLAYOUT_CAP {
        if s.is_terminal() {
            return Ok(winner(&s));
        }
        let policy = if is_white_seat(s.mover()) {
            &pair.white
        } else {
            &pair.black
        };
        let a = opponent_move(policy, &s, rng)?;
        s = s.apply(&a, rng)?.state_after;
    }
    Ok(None)
}

fn winner(s: &State) -> Option<Player> {
    match s {
        State::TicTacToe(b) => b.winner().map(|(p, _)| p),
        State::Breakthrough(b) => b.winner(),
        _ => None,
    }
}

/// Plays `n_rollouts` games from `state`; games that hit the ply cap count
/// as a win for neither side.
pub fn mc_winrate(
    state: &State,
    pair: &PolicyPair,
    n_rollouts: u32,
    threshold: f64,
    rng: &mut Rng,
) -> Result<AdvantageLabel, OracleError> {
    if n_rollouts == 0 {
        return Err(OracleError::Config("n_rollouts must be at least 1".into()));
    }
    if !state.kind().is_two_player() {
        return Err(OracleError::Unsupported(state.kind()));
    }
    let mut white_wins = 0u32;
    for _ in 0..n_rollouts {
        if play_game(state, pair, rng)?.is_some_and(is_white_seat) {
            white_wins += 1;
        }
    }
    let winrate_white = f64::from(white_wins) / f64::from(n_rollouts);
    Ok(AdvantageLabel {
        state_text: state.text(),
        winrate_white,
        n_rollouts,
        threshold,
        side: side_from_winrate(winrate_white, threshold),
    })
}

/// Labels a state with an RNG stream derived from its text, so any caller
/// with the same seed and settings reproduces the label exactly.
pub fn label_state(
    state: &State,
    pair: &PolicyPair,
    n_rollouts: u32,
    threshold: f64,
    seed: u64,
) -> Result<AdvantageLabel, OracleError> {
    let mut rng = rng_from(derive_seed(seed, &[stable_hash(&state.text())]));
    mc_winrate(state, pair, n_rollouts, threshold, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_core::Outcome;
    use crate::environments::breakthrough::BreakthroughBoard;
    use crate::environments::tictactoe::TicTacToeBoard;

    #[test]
    fn one_ply_forced_white_win() {
        // Every white move from c4 reaches row 5.
        let b =
            BreakthroughBoard::parse("5b....\n4..w..\n3.....\n2.....\n1.....\n abcde", Some(Player::White)).unwrap();
        for a in b.legal_actions().unwrap() {
            assert_eq!(b.apply(&a).unwrap().outcome, Some(Outcome::Win(Player::White)));
        }
        let l = mc_winrate(
            &State::Breakthrough(b),
            &PolicyPair::random(),
            1000,
            0.55,
            &mut rng_from(1),
        )
        .unwrap();
        assert_eq!(l.side, AdvantageSide::White);
        assert_eq!(l.winrate_white, 1.0);
    }

    #[test]
    fn tictactoe_random_selfplay_is_unlabelled_at_high_threshold() {
        let s = State::TicTacToe(TicTacToeBoard::empty());
        let l = mc_winrate(&s, &PolicyPair::random(), 2000, 0.95, &mut rng_from(2)).unwrap();
        assert_eq!(l.side, AdvantageSide::None);
    }

    #[test]
    fn terminal_black_win() {
        let b =
            BreakthroughBoard::parse("5.....\n4.....\n3.....\n2.....\n1b...w\n abcde", Some(Player::White)).unwrap();
        let l = mc_winrate(
            &State::Breakthrough(b),
            &PolicyPair::random(),
            10,
            0.55,
            &mut rng_from(0),
        )
        .unwrap();
        assert_eq!(l.winrate_white, 0.0);
        assert_eq!(l.side, AdvantageSide::Black);
    }

    #[test]
    fn threshold_band() {
        assert_eq!(side_from_winrate(0.56, 0.55), AdvantageSide::White);
        assert_eq!(side_from_winrate(0.44, 0.55), AdvantageSide::Black);
        assert_eq!(side_from_winrate(0.5, 0.55), AdvantageSide::None);
        assert_eq!(side_from_winrate(0.55, 0.55), AdvantageSide::None);
    }

    #[test]
    fn seeded_labels_repeat() {
        let s = State::Breakthrough(BreakthroughBoard::initial());
        let a = label_state(&s, &PolicyPair::random(), 50, 0.55, 4).unwrap();
        let b = label_state(&s, &PolicyPair::random(), 50, 0.55, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_rollouts_rejected() {
        let s = State::TicTacToe(TicTacToeBoard::empty());
        assert!(mc_winrate(&s, &PolicyPair::random(), 0, 0.55, &mut rng_from(0)).is_err());
    }

    #[test]
    fn mixed_policies() {
        let pair = PolicyPair {
            white: OpponentKind::FirstAvailable,
            black: OpponentKind::UniformRandom,
        };
        let s = State::TicTacToe(TicTacToeBoard::empty());
        let l = mc_winrate(&s, &pair, 200, 0.55, &mut rng_from(5)).unwrap();
        assert!((0.0..=1.0).contains(&l.winrate_white));
    }
}
