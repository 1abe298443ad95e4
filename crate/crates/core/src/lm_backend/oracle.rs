//! A backend that answers the bundled prompt templates from ground truth.
//!
//! It recognises the template behind each request, recovers the board from
//! the slot values and replies in the format the template asks for. Replies
//! are a pure function of the request digest, so runs replay exactly.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng as _;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, BackendError, CompletionRequest, CompletionResult};
use crate::env_core::{rng_from, AgentAction, EnvKind, Player, Rng, State};
use crate::environments::breakthrough::BreakthroughBoard;
use crate::environments::frozenlake::{self, FrozenLakeGrid};
use crate::environments::maze::{self, Cell, MazeLayout};
use crate::environments::tictactoe::{self, TicTacToeBoard};
use crate::oracles::minimax::value_for_o;
use crate::oracles::winrate::{label_state, AdvantageSide, PolicyPair, DEFAULT_THRESHOLD};
use crate::prompt_kit::{parse_maze_evaluation, parse_value_reply, PromptTemplate, Slots, TemplateRegistry};
use crate::util::stable_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Best move by exact search (tic-tac-toe) or shortest path.
    #[default]
    Optimal,
    /// Like `Optimal`, but improvement prompts rank candidates by the
    /// evaluations they carry, using ground truth only to break ties.
    Critic,
    /// Uniform over legal moves, seeded by the request.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    /// Ground-truth values.
    #[default]
    Exact,
    /// Monte-Carlo prompts are answered from the rollout endings they carry
    /// instead of ground truth. Look-ahead (TD) prompts are always answered by
    /// aggregating their variations.
    Aggregate,
    /// Uniformly random value over the template's range.
    CoinFlip,
    Constant(f64),
}

fn default_rollouts() -> u32 {
    100
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    #[serde(default)]
    pub policy: PolicyMode,
    #[serde(default)]
    pub value: ValueMode,
    /// Rollouts behind each Breakthrough advantage label.
    #[serde(default = "default_rollouts")]
    pub label_rollouts: u32,
    #[serde(default = "default_threshold")]
    pub label_threshold: f64,
    #[serde(default)]
    pub label_seed: u64,
    /// Required for maze prompts.
    #[serde(default)]
    pub maze_layout: Option<String>,
    /// Fraction of replies replaced by unparseable prose.
    #[serde(default)]
    pub malformed_rate: f64,
    /// Simulated per-request latency in milliseconds.
    #[serde(default)]
    pub latency_ms: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            policy: PolicyMode::Optimal,
            value: ValueMode::Exact,
            label_rollouts: default_rollouts(),
            label_threshold: default_threshold(),
            label_seed: 0,
            maze_layout: None,
            malformed_rate: 0.0,
            latency_ms: 0,
        }
    }
}

impl OracleOptions {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Config(m.to_string()));
        if self.label_rollouts == 0 {
            return bad("label_rollouts must be at least 1");
        }
        if !(0.5..1.0).contains(&self.label_threshold) {
            return bad("label_threshold must lie in [0.5, 1)");
        }
        if !(0.0..=1.0).contains(&self.malformed_rate) {
            return bad("malformed_rate must lie in [0, 1]");
        }
        if let ValueMode::Constant(c) = self.value {
            if !c.is_finite() {
                return bad("constant value must be finite");
            }
        }
        Ok(())
    }
}

pub struct OracleBackend {
    env: EnvKind,
    options: OracleOptions,
    registry: Arc<TemplateRegistry>,
    maze: Option<Arc<MazeLayout>>,
    id: String,
    max_in_flight: usize,
}

const MALFORMED_REPLY: &str = "I need to think about this position a little longer before answering.";

fn unscripted(msg: impl Into<String>) -> BackendError {
    BackendError::Unscripted(msg.into())
}

fn slot<'a>(slots: &'a Slots, key: &str) -> Result<&'a str, BackendError> {
    slots.get(key).ok_or_else(|| unscripted(format!("missing slot {key}")))
}

fn player_from(label: &str) -> Result<Player, BackendError> {
    match label.trim() {
        "O" => Ok(Player::O),
        "X" => Ok(Player::X),
        other => Err(unscripted(format!("unknown player {other}"))),
    }
}

fn ending_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"The game is over\. (?:(O|X) wins|The game is a draw)").expect("static regex"))
}

fn eval_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"final_evaluation"?\s*:\s*"?(-?[0-9]+(?:\.[0-9]+)?)"#).expect("static regex"))
}

fn candidate_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^### Evaluation for taking action ([^\n]*?):$").expect("static regex"))
}

/// Splits "### Evaluation for taking action A:\n..." blocks into (A, body).
fn candidate_blocks(text: &str) -> Vec<(String, String)> {
    let heads: Vec<_> = candidate_re().captures_iter(text).collect();
    heads
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let whole = c.get(0).expect("match");
            let end = heads
                .get(i + 1)
                .map_or(text.len(), |n| n.get(0).expect("match").start());
            (c[1].to_string(), text[whole.end()..end].trim().to_string())
        })
        .collect()
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn value_json(thought: serde_json::Value, v: f64) -> String {
    json!({ "thought": thought, "final_evaluation": v }).to_string()
}

impl OracleBackend {
    pub fn new(env: EnvKind, options: OracleOptions) -> Result<Self, BackendError> {
        options.validate()?;
        let maze = match (&options.maze_layout, env) {
            (Some(name), _) => Some(Arc::new(
                MazeLayout::load(name).map_err(|e| BackendError::Config(e.to_string()))?,
            )),
            (None, EnvKind::Maze) => return Err(BackendError::Config("maze oracle needs maze_layout".into())),
            (None, _) => None,
        };
        Ok(OracleBackend {
            env,
            id: format!("oracle:{env}"),
            options,
            registry: TemplateRegistry::builtin(),
            maze,
            max_in_flight: 1,
        })
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn with_registry(mut self, registry: Arc<TemplateRegistry>) -> Self {
        self.registry = registry;
        self
    }

    pub fn options(&self) -> &OracleOptions {
        &self.options
    }

    fn pick(&self, legal: &[AgentAction], best: impl FnOnce() -> AgentAction, rng: &mut Rng) -> AgentAction {
        match self.options.policy {
            PolicyMode::Random if !legal.is_empty() => legal[rng.gen_range(0..legal.len())].clone(),
            _ => best(),
        }
    }

    /// Replaces a ground-truth value according to the value mode.
    fn shape_value(&self, exact: f64, lo: f64, hi: f64, rng: &mut Rng) -> f64 {
        match self.options.value {
            ValueMode::Exact | ValueMode::Aggregate => exact,
            ValueMode::CoinFlip => rng.gen_range(lo..=hi),
            ValueMode::Constant(c) => c.clamp(lo, hi),
        }
    }

    fn reply(&self, t: &PromptTemplate, slots: &Slots, rng: &mut Rng) -> Result<String, BackendError> {
        match t.id.as_str() {
            "tictactoe_policy_inference" | "tictactoe_policy_improvement" => self.ttt_policy(t, slots, rng),
            "tictactoe_policy_evaluation" | "tictactoe_value_query" | "tictactoe_state_value" | "tictactoe_td" => {
                self.ttt_value(t, slots, rng)
            }
            "frozenlake_value" | "frozenlake_value_query" => self.lake_value(slots, rng),
            "frozenlake_policy_inference" | "frozenlake_policy_improvement" => self.lake_policy(t, slots, rng),
            "breakthrough_eval" | "breakthrough_td" => self.bt_eval(t, slots, rng),
            "maze_value" => self.maze_value(slots, rng),
            "maze_td_g2" => self.maze_g2(slots, rng),
            "maze_policy_inference" | "maze_policy_improvement" => self.maze_policy(t, slots, rng),
            other => Err(unscripted(format!("template {other}"))),
        }
    }

    fn ttt_policy(&self, t: &PromptTemplate, slots: &Slots, rng: &mut Rng) -> Result<String, BackendError> {
        let mover = player_from(slot(slots, "next_player")?)?;
        let board = TicTacToeBoard::parse(slot(slots, "state")?, Some(mover)).map_err(|e| unscripted(e.to_string()))?;
        let legal = board.legal_actions().map_err(|e| unscripted(e.to_string()))?;
        let offered: Vec<AgentAction> = slot(slots, "available_positions")?
            .split(|c: char| !c.is_ascii_digit())
            .filter_map(|p| tictactoe::parse_action(&legal, p))
            .collect();
        let candidates = if offered.is_empty() { legal.clone() } else { offered };
        let sign = if mover == Player::O { 1.0 } else { -1.0 };
        let exact = |a: &AgentAction| {
            board
                .play(a.id as u8)
                .map(|b| f64::from(value_for_o(&b)) * sign)
                .unwrap_or(f64::NEG_INFINITY)
        };
        let mut verdicts: Vec<(u32, f64)> = Vec::new();
        if t.id == "tictactoe_policy_improvement" {
            for (a, body) in candidate_blocks(slot(slots, "next_states")?) {
                if let (Some(act), Ok(r)) = (tictactoe::parse_action(&legal, &a), parse_value_reply(&body, None)) {
                    verdicts.push((act.id, r.final_evaluation * sign));
                }
            }
        }
        let verdict = |a: &AgentAction| {
            verdicts
                .iter()
                .find(|(id, _)| *id == a.id)
                .map_or(f64::NEG_INFINITY, |(_, v)| *v)
        };
        let critic_first = self.options.policy == PolicyMode::Critic;
        let best = || {
            candidates
                .iter()
                .max_by(|a, b| {
                    let (primary, secondary) = if critic_first {
                        (verdict(a).total_cmp(&verdict(b)), exact(a).total_cmp(&exact(b)))
                    } else {
                        (exact(a).total_cmp(&exact(b)), verdict(a).total_cmp(&verdict(b)))
                    };
                    primary.then(secondary).then(b.id.cmp(&a.id))
                })
                .cloned()
                .unwrap_or_else(|| legal[0].clone())
        };
        let choice = self.pick(&candidates, best, rng);
        Ok(json!({
            "thought": format!("Playing {} keeps the best result available for {mover}.", choice.id),
            "best_move": choice.id,
        })
        .to_string())
    }

    fn ttt_value(&self, t: &PromptTemplate, slots: &Slots, rng: &mut Rng) -> Result<String, BackendError> {
        let mover = player_from(slot(slots, "player")?)?;
        let board = TicTacToeBoard::parse(slot(slots, "board")?, Some(mover)).map_err(|e| unscripted(e.to_string()))?;
        let target = match slots.get("action") {
            Some(a) => {
                let cell: u8 = a.trim().parse().map_err(|_| unscripted(format!("bad action {a}")))?;
                board.play(cell).map_err(|e| unscripted(e.to_string()))?
            }
            None => board,
        };
        let exact = f64::from(value_for_o(&target));
        let aggregated = match (self.options.value, t.id.as_str()) {
            (ValueMode::Aggregate, "tictactoe_policy_evaluation") => {
                let outcomes: Vec<f64> = ending_re()
                    .captures_iter(slot(slots, "rollouts")?)
                    .map(|c| match c.get(1).map(|m| m.as_str()) {
                        Some("O") => 1.0,
                        Some(_) => -1.0,
                        None => 0.0,
                    })
                    .collect();
                mean(&outcomes)
            }
            (_, "tictactoe_td") => {
                let evals: Vec<f64> = split_variations(slot(slots, "variations")?)
                    .into_iter()
                    .filter_map(|v| eval_re().captures_iter(v).last()?[1].parse().ok())
                    .collect();
                majority_sign(&evals)
            }
            _ => None,
        };
        let v = self.shape_value(aggregated.unwrap_or(exact), -1.0, 1.0, rng);
        let side = match v {
            v if v > 0.0 => "O",
            v if v < 0.0 => "X",
            _ => "neither side",
        };
        Ok(value_json(
            json!({
                "Win probability": format!("The position favours {side}."),
                "Threat": "Judged from the lines still open to each side.",
                "Potential strategies": "Both sides should complete or block the remaining lines.",
            }),
            v,
        ))
    }

    fn lake_grid(&self, slots: &Slots) -> Result<FrozenLakeGrid, BackendError> {
        FrozenLakeGrid::parse(slot(slots, "board")?, false, frozenlake::DEFAULT_STEP_CAP)
            .map_err(|e| unscripted(e.to_string()))
    }

    /// Value of the board reached by moving in direction `dir` without slipping.
    fn lake_exact(g: &FrozenLakeGrid, dir: u32) -> f64 {
        let next = g.step_with_direction(dir);
        if next.in_hole() {
            -5.0
        } else if next.on_goal() {
            5.0
        } else {
            next.distance_to_goal().map_or(-5.0, |d| -0.1 * f64::from(d))
        }
    }

    fn lake_value(&self, slots: &Slots, rng: &mut Rng) -> Result<String, BackendError> {
        let g = self.lake_grid(slots)?;
        let a = frozenlake::parse_action(&frozenlake::all_actions(), slot(slots, "action")?)
            .ok_or_else(|| unscripted("unknown frozenlake action"))?;
        let v = self.shape_value(Self::lake_exact(&g, a.id), -5.0, 5.0, rng);
        Ok(value_json(
            json!({
                "Win probability": "Estimated from the distance left to the goal.",
                "Threat": "Holes next to the path can swallow a slipping player.",
                "Potential strategies": "Keep to the shortest safe path.",
            }),
            v,
        ))
    }

    fn lake_policy(&self, t: &PromptTemplate, slots: &Slots, rng: &mut Rng) -> Result<String, BackendError> {
        let g = self.lake_grid(slots)?;
        let legal = frozenlake::all_actions();
        let exact = |a: &AgentAction| Self::lake_exact(&g, a.id);
        let best = || {
            let mut scored: Vec<(AgentAction, f64)> = Vec::new();
            if t.id == "frozenlake_policy_improvement" {
                scored = candidate_blocks(slots.get("evaluations").unwrap_or(""))
                    .into_iter()
                    .filter_map(|(a, body)| {
                        let act = frozenlake::parse_action(&legal, &a)?;
                        Some((act, parse_value_reply(&body, None).ok()?.final_evaluation))
                    })
                    .collect();
            }
            if scored.is_empty() {
                scored = legal.iter().map(|a| (a.clone(), exact(a))).collect();
            }
            scored
                .into_iter()
                .max_by(|(a, x), (b, y)| x.total_cmp(y).then(exact(a).total_cmp(&exact(b))).then(b.id.cmp(&a.id)))
                .map(|(a, _)| a)
                .unwrap_or_else(|| legal[0].clone())
        };
        let choice = self.pick(&legal, best, rng);
        Ok(json!({
            "thought": format!("Moving {} brings the player closest to the goal while avoiding holes.", choice.display),
            "best_move": choice.id,
        })
        .to_string())
    }

    fn bt_eval(&self, t: &PromptTemplate, slots: &Slots, rng: &mut Rng) -> Result<String, BackendError> {
        let board = BreakthroughBoard::parse(slot(slots, "board")?, None).map_err(|e| unscripted(e.to_string()))?;
        let state = State::Breakthrough(board);
        let label = label_state(
            &state,
            &PolicyPair::random(),
            self.options.label_rollouts,
            self.options.label_threshold,
            self.options.label_seed,
        )
        .map_err(|e| unscripted(e.to_string()))?;
        let exact = match label.side {
            AdvantageSide::None if label.winrate_white >= 0.5 => AdvantageSide::White,
            AdvantageSide::None => AdvantageSide::Black,
            s => s,
        };
        let aggregated = if t.id == "breakthrough_td" {
            majority_tag(slot(slots, "variations")?)
        } else {
            None
        };
        let side = match self.options.value {
            ValueMode::CoinFlip => {
                if rng.gen_bool(0.5) {
                    AdvantageSide::White
                } else {
                    AdvantageSide::Black
                }
            }
            ValueMode::Constant(c) if c >= 0.0 => AdvantageSide::White,
            ValueMode::Constant(_) => AdvantageSide::Black,
            _ => aggregated.unwrap_or(exact),
        };
        let suggestion = board
            .legal_moves()
            .ok()
            .and_then(|ms| ms.first().map(|m| m.notation()))
            .unwrap_or_else(|| "none, the game is over".into());
        Ok(format!(
            "*Tactical Considerations*: White has {} pawns and black has {}.\n\
             *Positional Evaluation*: Random playouts from here are won by white {:.0}% of the time.\n\
             *Suggested Moves*: {}.\n\
             *Advantage*: {}",
            board.count(Player::White),
            board.count(Player::Black),
            100.0 * label.winrate_white,
            suggestion,
            side.tag()
        ))
    }

    fn maze_layout(&self) -> Result<&MazeLayout, BackendError> {
        self.maze
            .as_deref()
            .ok_or_else(|| unscripted("no maze layout configured"))
    }

    fn maze_position(&self, slots: &Slots) -> Result<(Cell, &MazeLayout), BackendError> {
        let layout = self.maze_layout()?;
        let pos = maze::parse_position(slot(slots, "game_content")?).ok_or_else(|| unscripted("no maze position"))?;
        Ok((pos, layout))
    }

    fn maze_dist(layout: &MazeLayout, cell: Cell) -> f64 {
        f64::from(layout.distance(cell).unwrap_or(99))
    }

    fn maze_value(&self, slots: &Slots, rng: &mut Rng) -> Result<String, BackendError> {
        let (pos, layout) = self.maze_position(slots)?;
        let d = Self::maze_dist(layout, pos);
        let v = self.shape_value(-d, -20.0, 0.0, rng);
        Ok(json!({
            "thoughts": format!("The agent is at {}, {} and the goal is at {}, {}.", pos.0, pos.1, layout.goal.0, layout.goal.1),
            "final_evaluation": v,
        })
        .to_string())
    }

    fn maze_q(layout: &MazeLayout, pos: Cell, id: u32) -> f64 {
        -1.0 - Self::maze_dist(layout, layout.step(pos, id))
    }

    fn maze_g2(&self, slots: &Slots, rng: &mut Rng) -> Result<String, BackendError> {
        let (pos, layout) = self.maze_position(slots)?;
        let a = maze::parse_action(&maze::all_actions(), slot(slots, "chosen_action")?)
            .ok_or_else(|| unscripted("unknown maze action"))?;
        let exact = Self::maze_q(layout, pos, a.id);
        let aggregated = aggregate_maze_variations(slot(slots, "variations")?);
        let v = self.shape_value(aggregated.unwrap_or(exact), -20.0, 0.0, rng);
        Ok(json!({
            "thoughts": format!("After {} the look-ahead ends within reach of the goal.", a.display),
            "final_evaluation": v,
        })
        .to_string())
    }

    fn maze_policy(&self, t: &PromptTemplate, slots: &Slots, rng: &mut Rng) -> Result<String, BackendError> {
        let layout = self.maze_layout()?;
        let legal = maze::all_actions();
        let best = || {
            let exact = |a: &AgentAction| {
                maze::parse_position(slots.get("game_content").unwrap_or(""))
                    .map_or(0.0, |pos| Self::maze_q(layout, pos, a.id))
            };
            let scored: Vec<(AgentAction, f64)> = if t.id == "maze_policy_improvement" {
                legal
                    .iter()
                    .filter_map(|a| {
                        let key = format!("evaluations_{}", a.display.trim_start_matches("move "));
                        let v = parse_maze_evaluation(slots.get(&key)?).ok()?.verdict.scalar()?;
                        Some((a.clone(), v))
                    })
                    .collect()
            } else {
                legal.iter().map(|a| (a.clone(), exact(a))).collect()
            };
            scored
                .into_iter()
                .max_by(|(a, x), (b, y)| x.total_cmp(y).then(b.id.cmp(&a.id)))
                .map(|(a, _)| a)
                .unwrap_or_else(|| legal[0].clone())
        };
        let choice = self.pick(&legal, best, rng);
        Ok(json!({ "action": choice.display }).to_string())
    }
}

fn variation_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^(?:\*Variation|Variation) \d+:").expect("static regex"))
}

fn split_variations(text: &str) -> Vec<&str> {
    let starts: Vec<usize> = variation_re().find_iter(text).map(|m| m.start()).collect();
    starts
        .iter()
        .enumerate()
        .map(|(i, &s)| &text[s..starts.get(i + 1).copied().unwrap_or(text.len())])
        .collect()
}

/// Majority of the last advantage tag of each variation; ties go to the first variation's tag.
pub(crate) fn majority_tag(variations: &str) -> Option<AdvantageSide> {
    let tags: Vec<AdvantageSide> = split_variations(variations)
        .into_iter()
        .filter_map(|v| crate::prompt_kit::parse_advantage(v).ok().map(|r| r.side))
        .collect();
    let white = tags.iter().filter(|&&s| s == AdvantageSide::White).count();
    let black = tags.len() - white;
    match white.cmp(&black) {
        std::cmp::Ordering::Greater => Some(AdvantageSide::White),
        std::cmp::Ordering::Less => Some(AdvantageSide::Black),
        std::cmp::Ordering::Equal => tags.first().copied(),
    }
}

/// +1, -1 or 0 by which sign is more common.
fn majority_sign(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let pos = xs.iter().filter(|&&x| x > 0.0).count();
    let neg = xs.iter().filter(|&&x| x < 0.0).count();
    Some(match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => 1.0,
        std::cmp::Ordering::Less => -1.0,
        std::cmp::Ordering::Equal => 0.0,
    })
}

/// Best of (evaluation of the last position - moves) over variations; the
/// chosen action counts as the first move.
fn aggregate_maze_variations(variations: &str) -> Option<f64> {
    split_variations(variations)
        .into_iter()
        .filter_map(|v| {
            let moves = v.lines().filter(|l| l.trim_start().starts_with("move ")).count() as f64;
            let eval: f64 = eval_re().captures_iter(v).last()?[1].parse().ok()?;
            Some(eval - moves)
        })
        .max_by(f64::total_cmp)
}

impl Backend for OracleBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let started = Instant::now();
        let (template, slots) = self
            .registry
            .identify(&request.turns)
            .ok_or_else(|| unscripted("prompt matches no known template"))?;
        if template.env != self.env && !(template.env == EnvKind::Maze && self.maze.is_some()) {
            return Err(unscripted(format!(
                "{} prompt sent to {} oracle",
                template.env, self.env
            )));
        }
        let mut rng = rng_from(stable_hash(&request.digest()));
        let text = if self.options.malformed_rate > 0.0 && rng.gen_bool(self.options.malformed_rate) {
            MALFORMED_REPLY.to_string()
        } else {
            self.reply(template, &slots, &mut rng)?
        };
        if self.options.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.options.latency_ms));
        }
        Ok(CompletionResult {
            text,
            backend_id: self.id.clone(),
            cached: false,
            latency: started.elapsed(),
        })
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm_backend::{ChatTurn, SamplingParams};
    use crate::prompt_kit::{parse_advantage, parse_policy_reply, parse_value_reply};

    fn request(turns: Vec<ChatTurn>) -> CompletionRequest {
        CompletionRequest {
            turns,
            params: SamplingParams::default(),
        }
    }

    fn ask(b: &OracleBackend, id: &str, slots: Slots) -> String {
        let turns = TemplateRegistry::builtin().render(id, &slots).unwrap();
        b.complete(&request(turns)).unwrap().text
    }

    #[test]
    fn tictactoe_policy_blocks() {
        let b = OracleBackend::new(EnvKind::TicTacToe, OracleOptions::default()).unwrap();
        let board = TicTacToeBoard::from_positions(&[1, 2], &[3, 5]).unwrap();
        let reply = ask(
            &b,
            "tictactoe_policy_inference",
            Slots::new()
                .set("next_player", "O")
                .set("state", board.render())
                .set("available_positions", "4, 6, 7, 8, 9"),
        );
        let legal = board.legal_actions().unwrap();
        assert_eq!(
            parse_policy_reply(&reply, EnvKind::TicTacToe, &legal)
                .unwrap()
                .best_move
                .id,
            7
        );
    }

    #[test]
    fn tictactoe_values_follow_minimax() {
        let b = OracleBackend::new(EnvKind::TicTacToe, OracleOptions::default()).unwrap();
        let board = TicTacToeBoard::from_positions(&[1, 2], &[3, 5]).unwrap();
        for (cell, want) in [(7u8, 0.0), (4, -1.0)] {
            let reply = ask(
                &b,
                "tictactoe_value_query",
                Slots::new()
                    .set("player", "O")
                    .set("board", board.render())
                    .set("action", cell.to_string()),
            );
            assert_eq!(
                parse_value_reply(&reply, None).unwrap().final_evaluation,
                want,
                "cell {cell}"
            );
        }
    }

    #[test]
    fn critic_mode_follows_given_evaluations() {
        let opts = OracleOptions {
            policy: PolicyMode::Critic,
            ..OracleOptions::default()
        };
        let b = OracleBackend::new(EnvKind::TicTacToe, opts).unwrap();
        let board = TicTacToeBoard::from_positions(&[1, 2], &[3, 5]).unwrap();
        // Misleading evaluations are obeyed in critic mode.
        let evals = "### Evaluation for taking action 4:\n{\"final_evaluation\": 1}\n\n### Evaluation for taking action 7:\n{\"final_evaluation\": -1}";
        let reply = ask(
            &b,
            "tictactoe_policy_improvement",
            Slots::new()
                .set("next_player", "O")
                .set("state", board.render())
                .set("available_positions", "4, 6, 7, 8, 9")
                .set("next_states", evals),
        );
        let legal = board.legal_actions().unwrap();
        assert_eq!(
            parse_policy_reply(&reply, EnvKind::TicTacToe, &legal)
                .unwrap()
                .best_move
                .id,
            4
        );
    }

    #[test]
    fn optimal_mode_ignores_misleading_evaluations() {
        let b = OracleBackend::new(EnvKind::TicTacToe, OracleOptions::default()).unwrap();
        let board = TicTacToeBoard::from_positions(&[1, 2], &[3, 5]).unwrap();
        let evals = "### Evaluation for taking action 4:\n{\"final_evaluation\": 1}\n\n### Evaluation for taking action 8:\n{\"final_evaluation\": 1}";
        let reply = ask(
            &b,
            "tictactoe_policy_improvement",
            Slots::new()
                .set("next_player", "O")
                .set("state", board.render())
                .set("available_positions", "4, 8")
                .set("next_states", evals),
        );
        let legal = board.legal_actions().unwrap();
        // Both lose to 7; the tie goes to the lowest id.
        assert_eq!(
            parse_policy_reply(&reply, EnvKind::TicTacToe, &legal)
                .unwrap()
                .best_move
                .id,
            4
        );
    }

    #[test]
    fn breakthrough_eval_has_tag() {
        let opts = OracleOptions {
            label_rollouts: 20,
            ..OracleOptions::default()
        };
        let b = OracleBackend::new(EnvKind::Breakthrough, opts).unwrap();
        let reply = ask(
            &b,
            "breakthrough_eval",
            Slots::new().set("board", BreakthroughBoard::initial().describe()),
        );
        assert!(parse_advantage(&reply).is_ok());
        let again = ask(
            &b,
            "breakthrough_eval",
            Slots::new().set("board", BreakthroughBoard::initial().describe()),
        );
        assert_eq!(reply, again);
    }

    #[test]
    fn majority_tie_goes_to_first() {
        let v = "*Variation 1:* \n...<black>\n\n*Variation 2:* \n... <white>";
        assert_eq!(majority_tag(v), Some(AdvantageSide::Black));
        let v = "*Variation 1:* \n<black>\n*Variation 2:* \n<white>\n*Variation 3:* \n<white>";
        assert_eq!(majority_tag(v), Some(AdvantageSide::White));
        assert_eq!(majority_tag("nothing"), None);
    }

    #[test]
    fn maze_policy_walks_shortest_path() {
        let opts = OracleOptions {
            maze_layout: Some("toy".into()),
            ..OracleOptions::default()
        };
        let b = OracleBackend::new(EnvKind::Maze, opts).unwrap();
        let spec = crate::environments::EnvSpec::maze("toy").unwrap();
        for start in spec.start_states().unwrap() {
            let State::Maze(w) = &start else { unreachable!() };
            let reply = ask(
                &b,
                "maze_policy_inference",
                Slots::new().set("game_content", w.render_history()),
            );
            let a = parse_policy_reply(&reply, EnvKind::Maze, &maze::all_actions())
                .unwrap()
                .best_move;
            let d0 = w.layout.distance(w.agent).unwrap();
            let d1 = w.layout.distance(w.layout.step(w.agent, a.id)).unwrap();
            assert_eq!(d1 + 1, d0);
        }
    }

    #[test]
    fn unknown_prompt_and_wrong_env() {
        let b = OracleBackend::new(EnvKind::TicTacToe, OracleOptions::default()).unwrap();
        let err = b.complete(&request(vec![ChatTurn::user("hello")])).unwrap_err();
        assert!(matches!(err, BackendError::Unscripted(_)));
        let turns = TemplateRegistry::builtin()
            .render("breakthrough_eval", &Slots::new().set("board", "x"))
            .unwrap();
        assert!(matches!(b.complete(&request(turns)), Err(BackendError::Unscripted(_))));
        assert!(OracleBackend::new(EnvKind::Maze, OracleOptions::default()).is_err());
    }

    #[test]
    fn malformed_rate_one_always_garbles() {
        let opts = OracleOptions {
            malformed_rate: 1.0,
            ..OracleOptions::default()
        };
        let b = OracleBackend::new(EnvKind::TicTacToe, opts).unwrap();
        let reply = ask(
            &b,
            "tictactoe_state_value",
            Slots::new()
                .set("player", "O")
                .set("board", TicTacToeBoard::empty().render()),
        );
        assert!(parse_value_reply(&reply, None).is_err());
    }
}
