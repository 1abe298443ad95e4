//! Tolerant parsers for model replies. Every function is total: malformed
//! input yields a `ParseError`, never a panic.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::ValueScale;
use crate::env_core::{AgentAction, EnvKind};
use crate::environments::{breakthrough, frozenlake, maze, tictactoe};
use crate::oracles::winrate::AdvantageSide;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("could not parse reply: {0}")]
    ParseFailure(String),
    #[error("reply names an illegal move `{0}`")]
    IllegalMove(String),
    #[error("reply carries no advantage tag")]
    NoTag,
}

/// What an evaluation ultimately says.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "value")]
pub enum Verdict {
    Scalar(f64),
    Side(AdvantageSide),
    /// Free-text evaluation with no machine-readable score.
    Narrative,
}

impl Verdict {
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Verdict::Scalar(v) => Some(*v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPolicyReply {
    pub thought: String,
    pub best_move: AgentAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedValueReply {
    pub thought: BTreeMap<String, String>,
    pub final_evaluation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageReply {
    pub narrative: String,
    pub side: AdvantageSide,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MazeEvaluation {
    pub thoughts: String,
    /// The `final_evaluation` text as written.
    pub evaluation: String,
    pub verdict: Verdict,
}

/// Upper bound on candidate `{` positions tried, keeping worst-case cost linear-ish.
const MAX_JSON_ATTEMPTS: usize = 64;

fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut esc = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            if esc {
                esc = false;
            } else if b == b'\\' {
                esc = true;
            } else if b == b'"' {
                in_str = false;
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z]*\s*(.*?)```").expect("static regex"))
}

fn parse_object(s: &str) -> Option<Map<String, Value>> {
    match serde_json::from_str::<Value>(s.trim()) {
        Ok(Value::Object(m)) => Some(m),
        Ok(Value::Array(items)) => items.into_iter().find_map(|v| match v {
            Value::Object(m) => Some(m),
            _ => None,
        }),
        _ => None,
    }
}

/// First parseable JSON object in `text`: balanced brace blocks first
/// (outermost before inner), then fenced code blocks.
pub fn extract_json(text: &str) -> Option<Map<String, Value>> {
    let bytes = text.as_bytes();
    let mut from = 0;
    let mut attempts = 0;
    while let Some(off) = text[from..].find('{') {
        let start = from + off;
        attempts += 1;
        if attempts > MAX_JSON_ATTEMPTS {
            break;
        }
        if let Some(end) = balanced_end(bytes, start) {
            if let Some(m) = parse_object(&text[start..=end]) {
                return Some(m);
            }
        }
        from = start + 1;
    }
    fence_re().captures_iter(text).find_map(|c| parse_object(&c[1]))
}

fn norm_key(k: &str) -> String {
    k.trim().to_ascii_lowercase().replace([' ', '-'], "_")
}

fn field<'a>(obj: &'a Map<String, Value>, names: &[&str]) -> Option<&'a Value> {
    obj.iter()
        .find(|(k, _)| names.contains(&norm_key(k).as_str()))
        .map(|(_, v)| v)
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn thought_map(obj: &Map<String, Value>) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    match field(obj, &["thought", "thoughts"]) {
        Some(Value::Object(m)) => {
            for (k, v) in m {
                out.insert(k.clone(), value_text(v));
            }
        }
        Some(Value::Array(items)) => {
            let joined: Vec<String> = items.iter().map(value_text).collect();
            out.insert("thought".into(), joined.join("\n"));
        }
        Some(v) => {
            out.insert("thought".into(), value_text(v));
        }
        None => {}
    }
    out
}

fn thought_text(obj: &Map<String, Value>) -> String {
    let m = thought_map(obj);
    if m.len() == 1 {
        return m.into_values().next().unwrap_or_default();
    }
    m.iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Resolves free text to a legal action with the environment's own rules.
pub fn match_action(kind: EnvKind, legal: &[AgentAction], text: &str) -> Option<AgentAction> {
    match kind {
        EnvKind::TicTacToe => tictactoe::parse_action(legal, text),
        EnvKind::Breakthrough => breakthrough::parse_action(legal, text),
        EnvKind::FrozenLake => frozenlake::parse_action(legal, text),
        EnvKind::Maze => maze::parse_action(legal, text),
    }
}

fn move_fallback_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)["']?(?:best[_ ]move|action)["']?\s*:\s*["']?([^"',}\n\]]+)"#).expect("static regex")
    })
}

/// Reads `best_move` (or `action`) and checks it against `legal`.
pub fn parse_policy_reply(text: &str, kind: EnvKind, legal: &[AgentAction]) -> Result<ParsedPolicyReply, ParseError> {
    let (thought, raw) = match extract_json(text) {
        Some(obj) => {
            let raw = match field(&obj, &["best_move", "action", "move"]) {
                Some(Value::Number(n)) => n.to_string(),
                Some(Value::String(s)) => s.clone(),
                Some(Value::Array(items)) if items.len() == 1 => value_text(&items[0]),
                Some(other) => return Err(ParseError::ParseFailure(format!("unusable move value {other}"))),
                None => return Err(ParseError::ParseFailure("no best_move field".into())),
            };
            (thought_text(&obj), raw)
        }
        None => {
            let caps = move_fallback_re()
                .captures_iter(text)
                .last()
                .ok_or_else(|| ParseError::ParseFailure("no JSON object or move field".into()))?;
            (String::new(), caps[1].trim().to_string())
        }
    };
    let best_move = match_action(kind, legal, &raw).ok_or(ParseError::IllegalMove(raw))?;
    Ok(ParsedPolicyReply { thought, best_move })
}

fn eval_fallback_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)["']?final[_ ]evaluation["']?\s*:\s*("(?:[^"\\]|\\.)*"|'[^']*'|[-+]?[0-9.eE+-]+)"#)
            .expect("static regex")
    })
}

/// The raw `final_evaluation` of a reply, from JSON or a key-value fallback.
fn final_evaluation(text: &str) -> Option<(Option<Map<String, Value>>, Value)> {
    if let Some(obj) = extract_json(text) {
        if let Some(v) = field(&obj, &["final_evaluation"]) {
            let v = v.clone();
            return Some((Some(obj), v));
        }
    }
    let caps = eval_fallback_re().captures_iter(text).last()?;
    let raw = &caps[1];
    let v = if let Some(inner) = raw.strip_prefix('\'').and_then(|r| r.strip_suffix('\'')) {
        Value::String(inner.to_string())
    } else if raw.starts_with('"') {
        serde_json::from_str(raw).ok()?
    } else {
        Value::String(raw.to_string())
    };
    Some((None, v))
}

fn as_number(v: &Value) -> Option<f64> {
    let x = match v {
        Value::Number(n) => n.as_f64()?,
        Value::String(s) => s.trim().parse::<f64>().ok()?,
        _ => return None,
    };
    x.is_finite().then_some(x)
}

/// Reads a numeric `final_evaluation`, clamped to `scale` when given.
pub fn parse_value_reply(text: &str, scale: Option<ValueScale>) -> Result<ParsedValueReply, ParseError> {
    let (obj, v) = final_evaluation(text).ok_or_else(|| ParseError::ParseFailure("no final_evaluation".into()))?;
    let x = as_number(&v).ok_or_else(|| ParseError::ParseFailure(format!("non-numeric final_evaluation {v}")))?;
    Ok(ParsedValueReply {
        thought: obj.as_ref().map(thought_map).unwrap_or_default(),
        final_evaluation: scale.map_or(x, |s| s.clamp(x)),
    })
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)<(white|black)>").expect("static regex"))
}

/// The last `<white>`/`<black>` tag decides the side.
pub fn parse_advantage(text: &str) -> Result<AdvantageReply, ParseError> {
    let last = tag_re().captures_iter(text).last().ok_or(ParseError::NoTag)?;
    let side = if last[1].eq_ignore_ascii_case("white") {
        AdvantageSide::White
    } else {
        AdvantageSide::Black
    };
    Ok(AdvantageReply {
        narrative: text.to_string(),
        side,
    })
}

/// Maze evaluations may be numeric or prose; both are accepted.
pub fn parse_maze_evaluation(text: &str) -> Result<MazeEvaluation, ParseError> {
    let (obj, v) = final_evaluation(text).ok_or_else(|| ParseError::ParseFailure("no final_evaluation".into()))?;
    let verdict = match as_number(&v) {
        Some(x) => Verdict::Scalar(x),
        None => Verdict::Narrative,
    };
    Ok(MazeEvaluation {
        thoughts: obj.as_ref().map(thought_text).unwrap_or_default(),
        evaluation: value_text(&v),
        verdict,
    })
}
