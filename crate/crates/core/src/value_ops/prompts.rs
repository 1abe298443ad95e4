//! Builds the chat prompts each operator sends, from environment states.

use crate::env_core::{render_transition_description, AgentAction, EnvKind, State, Trajectory};
use crate::environments::tictactoe::join_positions;
use crate::lm_backend::ChatTurn;
use crate::prompt_kit::{Slots, TemplateRegistry};

use super::{CandidateEvaluationSet, ValueOpsError, VariationPacket};

/// A rendered prompt and the template that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub template: &'static str,
    pub turns: Vec<ChatTurn>,
}

fn unsupported(what: &str, kind: EnvKind) -> ValueOpsError {
    ValueOpsError::Unsupported(format!("{what} for {kind}"))
}

fn render(reg: &TemplateRegistry, template: &'static str, slots: &Slots) -> Result<Prompt, ValueOpsError> {
    Ok(Prompt {
        template,
        turns: reg.render(template, slots)?,
    })
}

/// Transition sentences of a trajectory, one per line.
pub fn narrate(traj: &Trajectory, kind: EnvKind) -> Result<String, ValueOpsError> {
    let lines = traj
        .transitions
        .iter()
        .enumerate()
        .map(|(i, t)| render_transition_description(t, kind, i + 1))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(lines.join("\n"))
}

fn ending(traj: &Trajectory) -> String {
    traj.final_state()
        .and_then(State::ending_text)
        .unwrap_or_else(|| "The rollout stopped before the episode ended.".to_string())
}

pub fn rollout_sections(
    reg: &TemplateRegistry,
    kind: EnvKind,
    rollouts: &[Trajectory],
) -> Result<String, ValueOpsError> {
    let template = match kind {
        EnvKind::TicTacToe => "tictactoe_rollout_section",
        EnvKind::FrozenLake => "frozenlake_rollout_section",
        other => return Err(unsupported("rollout narration", other)),
    };
    let sections = rollouts
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let slots = Slots::new()
                .set("index", (i + 1).to_string())
                .set("transitions", narrate(r, kind)?)
                .set("ending", ending(r));
            Ok(reg.render_text(template, &slots)?)
        })
        .collect::<Result<Vec<_>, ValueOpsError>>()?;
    Ok(sections.join("\n\n"))
}

fn lake_moves(actions: &[AgentAction]) -> String {
    format!(
        "[{}]",
        actions.iter().map(|a| a.id.to_string()).collect::<Vec<_>>().join(", ")
    )
}

fn ttt_positions(actions: &[AgentAction]) -> String {
    join_positions(&actions.iter().map(|a| a.id).collect::<Vec<_>>())
}

/// Language MC prompt for (state, action) with full rollout narrations.
pub fn mc_prompt(
    reg: &TemplateRegistry,
    state: &State,
    action: &AgentAction,
    rollouts: &[Trajectory],
) -> Result<Prompt, ValueOpsError> {
    let sections = rollout_sections(reg, state.kind(), rollouts)?;
    match state {
        State::TicTacToe(b) => render(
            reg,
            "tictactoe_policy_evaluation",
            &Slots::new()
                .set("player", b.to_move.label())
                .set("board", b.render())
                .set("action", action.id.to_string())
                .set("rollouts", sections),
        ),
        State::FrozenLake(g) => render(
            reg,
            "frozenlake_value",
            &Slots::new()
                .set("board", g.render())
                .set("action", action.id.to_string())
                .set("rollouts", sections),
        ),
        other => Err(unsupported("Monte-Carlo evaluation", other.kind())),
    }
}

/// Direct value query. Deterministic environments evaluate the successor
/// when an action is given; tic-tac-toe and FrozenLake ask about the pair.
pub fn value_query_prompt(
    reg: &TemplateRegistry,
    state: &State,
    action: Option<&AgentAction>,
) -> Result<Prompt, ValueOpsError> {
    match (state, action) {
        (State::TicTacToe(b), Some(a)) => render(
            reg,
            "tictactoe_value_query",
            &Slots::new()
                .set("player", b.to_move.label())
                .set("board", b.render())
                .set("action", a.id.to_string()),
        ),
        (State::TicTacToe(b), None) => render(
            reg,
            "tictactoe_state_value",
            &Slots::new().set("player", b.to_move.label()).set("board", b.render()),
        ),
        (State::FrozenLake(g), Some(a)) => render(
            reg,
            "frozenlake_value_query",
            &Slots::new().set("board", g.render()).set("action", a.id.to_string()),
        ),
        (State::FrozenLake(_), None) => Err(unsupported("state-only value query", EnvKind::FrozenLake)),
        (State::Breakthrough(b), None) => render(reg, "breakthrough_eval", &Slots::new().set("board", b.describe())),
        (State::Maze(m), None) => render(reg, "maze_value", &Slots::new().set("game_content", m.render_history())),
        (State::Breakthrough(_) | State::Maze(_), Some(a)) => {
            let next = super::deterministic_successor(state, a)?;
            value_query_prompt(reg, &next, None)
        }
    }
}

/// Look-ahead aggregation prompt. Maze prompts evaluate `chosen`, the
/// action every variation starts with.
pub fn td_prompt(
    reg: &TemplateRegistry,
    state: &State,
    chosen: Option<&AgentAction>,
    variations: &[VariationPacket],
) -> Result<Prompt, ValueOpsError> {
    let join = |template: &str, build: &dyn Fn(usize, &VariationPacket) -> Result<Slots, ValueOpsError>| {
        variations
            .iter()
            .enumerate()
            .map(|(i, v)| Ok(reg.render_text(template, &build(i + 1, v)?)?))
            .collect::<Result<Vec<String>, ValueOpsError>>()
    };
    match state {
        State::Breakthrough(b) => {
            let parts = join("breakthrough_variation", &|i, v| {
                let sub = reg.render_text(
                    "breakthrough_subsequent",
                    &Slots::new()
                        .set("sub_board", v.successor_text.as_str())
                        .set("sub_eval", v.successor_evaluation.narrative.as_str()),
                )?;
                Ok(Slots::new()
                    .set("i", i.to_string())
                    .set("move_desc", v.move_description.as_str())
                    .set("subsequent_eval", sub))
            })?;
            render(
                reg,
                "breakthrough_td",
                &Slots::new()
                    .set("board", b.describe())
                    .set("variations", parts.join("\n\n")),
            )
        }
        State::Maze(m) => {
            let chosen =
                chosen.ok_or_else(|| ValueOpsError::Precondition("maze look-ahead needs the chosen action".into()))?;
            let parts = join("maze_variation", &|i, v| {
                Ok(Slots::new()
                    .set("index", i.to_string())
                    .set("trajectory", v.move_description.as_str())
                    .set("evaluation", v.successor_evaluation.narrative.as_str()))
            })?;
            render(
                reg,
                "maze_td_g2",
                &Slots::new()
                    .set("chosen_action", chosen.display.as_str())
                    .set("game_content", m.render_history())
                    .set("variations", parts.join("\n")),
            )
        }
        State::TicTacToe(b) => {
            let parts = join("tictactoe_td_variation", &|i, v| {
                Ok(Slots::new()
                    .set("index", i.to_string())
                    .set("transitions", v.move_description.as_str())
                    .set("evaluation", v.successor_evaluation.narrative.as_str()))
            })?;
            render(
                reg,
                "tictactoe_td",
                &Slots::new()
                    .set("player", b.to_move.label())
                    .set("board", b.render())
                    .set("variations", parts.join("\n\n")),
            )
        }
        State::FrozenLake(_) => Err(unsupported("look-ahead aggregation", EnvKind::FrozenLake)),
    }
}

fn candidate_fragments(
    reg: &TemplateRegistry,
    template: &str,
    cands: &CandidateEvaluationSet,
) -> Result<String, ValueOpsError> {
    let parts = cands
        .entries
        .iter()
        .map(|(a, est)| {
            Ok(reg.render_text(
                template,
                &Slots::new()
                    .set("action", a.id.to_string())
                    .set("evaluation", est.narrative.as_str()),
            )?)
        })
        .collect::<Result<Vec<String>, ValueOpsError>>()?;
    Ok(parts.join("\n\n"))
}

pub const NO_EVALUATION: &str = "no evaluation is available for this action";

pub fn improvement_prompt(reg: &TemplateRegistry, cands: &CandidateEvaluationSet) -> Result<Prompt, ValueOpsError> {
    let actions = cands.actions();
    match &cands.state {
        State::TicTacToe(b) => render(
            reg,
            "tictactoe_policy_improvement",
            &Slots::new()
                .set("next_player", b.to_move.label())
                .set("state", b.render())
                .set("available_positions", ttt_positions(&actions))
                .set(
                    "next_states",
                    candidate_fragments(reg, "tictactoe_candidate_evaluation", cands)?,
                ),
        ),
        State::FrozenLake(g) => render(
            reg,
            "frozenlake_policy_improvement",
            &Slots::new()
                .set("board", g.render())
                .set("available_moves", lake_moves(&actions))
                .set(
                    "evaluations",
                    candidate_fragments(reg, "frozenlake_candidate_evaluation", cands)?,
                ),
        ),
        State::Maze(_) => {
            let mut slots = Slots::new();
            for (id, dir) in [(1, "up"), (2, "down"), (3, "left"), (4, "right")] {
                let text = cands
                    .entries
                    .iter()
                    .find(|(a, _)| a.id == id)
                    .map_or(NO_EVALUATION, |(_, e)| e.narrative.as_str());
                slots.insert(&format!("evaluations_{dir}"), text);
            }
            render(reg, "maze_policy_improvement", &slots)
        }
        State::Breakthrough(_) => Err(unsupported("policy improvement", EnvKind::Breakthrough)),
    }
}

/// Prompt asking the policy for a move at `state`.
pub fn policy_prompt(reg: &TemplateRegistry, state: &State) -> Result<Prompt, ValueOpsError> {
    let legal = state.legal_actions()?;
    match state {
        State::TicTacToe(b) => render(
            reg,
            "tictactoe_policy_inference",
            &Slots::new()
                .set("next_player", b.to_move.label())
                .set("state", b.render())
                .set("available_positions", ttt_positions(&legal)),
        ),
        State::FrozenLake(g) => render(
            reg,
            "frozenlake_policy_inference",
            &Slots::new()
                .set("board", g.render())
                .set("available_moves", lake_moves(&legal)),
        ),
        State::Maze(m) => render(
            reg,
            "maze_policy_inference",
            &Slots::new().set("game_content", m.render_history()),
        ),
        State::Breakthrough(_) => Err(unsupported("policy prompt", EnvKind::Breakthrough)),
    }
}
