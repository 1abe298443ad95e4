//! Prompt templates as slot-filled data files, plus reply parsers.
//!
//! A template file starts with `@key value` metadata lines followed by
//! sections introduced by `<<<system>>>`, `<<<user>>>`, `<<<assistant>>>`
//! or (for fragments) `<<<text>>>`. The newline that ends the last line of a
//! section belongs to the file layout, not to the section body.

pub mod parse;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env_core::EnvKind;
use crate::lm_backend::{ChatTurn, Role};
use crate::util::sha256_hex;

pub use self::parse::{
    extract_json, match_action, parse_advantage, parse_maze_evaluation, parse_policy_reply, parse_value_reply,
    AdvantageReply, MazeEvaluation, ParseError, ParsedPolicyReply, ParsedValueReply, Verdict,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{template}` needs slot `{slot}`")]
    MissingSlot { template: String, slot: String },
    #[error("template `{template}` is a {actual:?} template")]
    WrongKind { template: String, actual: ReplyKind },
    #[error("bad template file {file}: {reason}")]
    Format { file: String, reason: String },
    #[error("io: {0}")]
    Io(String),
}

/// What a template's reply looks like, which decides the parser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyKind {
    Value,
    Policy,
    Advantage,
    Narrative,
    MazeAction,
    Fragment,
}

impl ReplyKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "value" => ReplyKind::Value,
            "policy" => ReplyKind::Policy,
            "advantage" => ReplyKind::Advantage,
            "narrative" => ReplyKind::Narrative,
            "maze_action" => ReplyKind::MazeAction,
            "fragment" => ReplyKind::Fragment,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueScale {
    pub lo: f64,
    pub hi: f64,
}

impl ValueScale {
    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lo..=self.hi).contains(&v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionRole {
    Chat(Role),
    Text,
}

#[derive(Debug, Clone)]
pub struct Section {
    pub role: SectionRole,
    pub body: String,
}

/// Slot name to value.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Slots(BTreeMap<String, String>);

impl Slots {
    pub fn new() -> Self {
        Slots(BTreeMap::new())
    }

    pub fn set(mut self, key: &str, value: impl Into<String>) -> Self {
        self.0.insert(key.to_string(), value.into());
        self
    }

    pub fn insert(&mut self, key: &str, value: impl Into<String>) {
        self.0.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

fn slot_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_][a-z0-9_]*)\}").expect("static regex"))
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub id: String,
    pub env: EnvKind,
    pub kind: ReplyKind,
    pub scale: Option<ValueScale>,
    pub sections: Vec<Section>,
    /// Declared slots in first-use order.
    pub slots: Vec<String>,
    source: String,
    matchers: OnceLock<Vec<Regex>>,
}

impl PromptTemplate {
    pub fn parse(id: &str, env: EnvKind, text: &str) -> Result<Self, PromptError> {
        let fail = |reason: String| PromptError::Format {
            file: id.to_string(),
            reason,
        };
        let mut kind = None;
        let mut scale = None;
        let mut sections: Vec<(SectionRole, Vec<&str>)> = Vec::new();
        for line in text.split('\n') {
            let marker = match line {
                "<<<system>>>" => Some(SectionRole::Chat(Role::System)),
                "<<<user>>>" => Some(SectionRole::Chat(Role::User)),
                "<<<assistant>>>" => Some(SectionRole::Chat(Role::Assistant)),
                "<<<text>>>" => Some(SectionRole::Text),
                _ => None,
            };
            if let Some(role) = marker {
                sections.push((role, Vec::new()));
                continue;
            }
            match sections.last_mut() {
                Some((_, lines)) => lines.push(line),
                None if line.trim().is_empty() => {}
                None => {
                    let (key, value) = line
                        .strip_prefix('@')
                        .and_then(|l| l.split_once(' '))
                        .ok_or_else(|| fail(format!("unexpected header line `{line}`")))?;
                    match key {
                        "kind" => {
                            kind = Some(
                                ReplyKind::parse(value.trim())
                                    .ok_or_else(|| fail(format!("unknown kind `{value}`")))?,
                            )
                        }
                        "scale" => {
                            let nums: Vec<f64> = value.split_whitespace().filter_map(|v| v.parse().ok()).collect();
                            match nums[..] {
                                [lo, hi] if lo < hi => scale = Some(ValueScale { lo, hi }),
                                _ => return Err(fail(format!("bad scale `{value}`"))),
                            }
                        }
                        other => return Err(fail(format!("unknown header `{other}`"))),
                    }
                }
            }
        }
        let kind = kind.ok_or_else(|| fail("missing @kind".into()))?;
        if sections.is_empty() {
            return Err(fail("no sections".into()));
        }
        let n = sections.len();
        let sections: Vec<Section> = sections
            .into_iter()
            .enumerate()
            .map(|(i, (role, mut lines))| {
                // The newline before a marker is consumed by the split; the
                // file's final newline leaves an empty last piece instead.
                if i + 1 == n && text.ends_with('\n') {
                    lines.pop();
                }
                Section {
                    role,
                    body: lines.join("\n"),
                }
            })
            .collect();
        let is_fragment = kind == ReplyKind::Fragment;
        if sections.iter().any(|s| (s.role == SectionRole::Text) != is_fragment) {
            return Err(fail(
                "fragments use one <<<text>>> section; prompts use chat roles".into(),
            ));
        }
        let mut slots: Vec<String> = Vec::new();
        for s in &sections {
            for c in slot_re().captures_iter(&s.body) {
                if !slots.iter().any(|x| x == &c[1]) {
                    slots.push(c[1].to_string());
                }
            }
        }
        Ok(PromptTemplate {
            id: id.to_string(),
            env,
            kind,
            scale,
            sections,
            slots,
            source: text.to_string(),
            matchers: OnceLock::new(),
        })
    }

    fn literal_len(&self) -> usize {
        self.sections
            .iter()
            .map(|s| slot_re().replace_all(&s.body, "").len())
            .sum()
    }

    pub fn checksum(&self) -> String {
        sha256_hex(self.source.as_bytes())
    }

    fn fill(&self, body: &str, slots: &Slots) -> Result<String, PromptError> {
        let mut missing = None;
        let out = slot_re().replace_all(body, |c: &regex::Captures| match slots.get(&c[1]) {
            Some(v) => v.to_string(),
            None => {
                missing.get_or_insert_with(|| c[1].to_string());
                String::new()
            }
        });
        match missing {
            Some(slot) => Err(PromptError::MissingSlot {
                template: self.id.clone(),
                slot,
            }),
            None => Ok(out.into_owned()),
        }
    }

    /// Substitutes every slot in one pass; values are never re-scanned.
    pub fn render(&self, slots: &Slots) -> Result<Vec<ChatTurn>, PromptError> {
        if self.kind == ReplyKind::Fragment {
            return Err(PromptError::WrongKind {
                template: self.id.clone(),
                actual: self.kind,
            });
        }
        self.sections
            .iter()
            .map(|s| {
                let role = match s.role {
                    SectionRole::Chat(r) => r,
                    SectionRole::Text => unreachable!("checked at parse time"),
                };
                Ok(ChatTurn::new(role, self.fill(&s.body, slots)?))
            })
            .collect()
    }

    pub fn render_text(&self, slots: &Slots) -> Result<String, PromptError> {
        if self.kind != ReplyKind::Fragment {
            return Err(PromptError::WrongKind {
                template: self.id.clone(),
                actual: self.kind,
            });
        }
        self.fill(&self.sections[0].body, slots)
    }

    fn matchers(&self) -> &[Regex] {
        self.matchers.get_or_init(|| {
            self.sections
                .iter()
                .map(|s| {
                    let mut pat = String::from("(?s)^");
                    let mut last = 0;
                    for m in slot_re().find_iter(&s.body) {
                        pat.push_str(&regex::escape(&s.body[last..m.start()]));
                        pat.push_str("(.*?)");
                        last = m.end();
                    }
                    pat.push_str(&regex::escape(&s.body[last..]));
                    pat.push('$');
                    Regex::new(&pat).expect("escaped template compiles")
                })
                .collect()
        })
    }

    fn section_slot_names(body: &str) -> Vec<String> {
        slot_re().captures_iter(body).map(|c| c[1].to_string()).collect()
    }

    /// Inverse of `render`: recovers slot values when `turns` were produced
    /// by this template. Repeated slots must agree.
    pub fn extract(&self, turns: &[ChatTurn]) -> Option<Slots> {
        if turns.len() != self.sections.len() {
            return None;
        }
        let mut out = Slots::new();
        for ((s, re), t) in self.sections.iter().zip(self.matchers()).zip(turns) {
            if s.role != SectionRole::Chat(t.role) {
                return None;
            }
            let caps = re.captures(&t.content)?;
            for (i, name) in Self::section_slot_names(&s.body).iter().enumerate() {
                let v = caps.get(i + 1).map_or("", |m| m.as_str());
                match out.get(name) {
                    Some(prev) if prev != v => return None,
                    _ => out.insert(name, v),
                }
            }
        }
        Some(out)
    }

    pub fn extract_text(&self, text: &str) -> Option<Slots> {
        let re = &self.matchers()[0];
        let caps = re.captures(text)?;
        let mut out = Slots::new();
        for (i, name) in Self::section_slot_names(&self.sections[0].body).iter().enumerate() {
            let v = caps.get(i + 1).map_or("", |m| m.as_str());
            match out.get(name) {
                Some(prev) if prev != v => return None,
                _ => out.insert(name, v),
            }
        }
        Some(out)
    }
}

macro_rules! builtin {
    ($($env:literal / $stem:literal),* $(,)?) => {
        &[$(($env, $stem, include_str!(concat!("../../templates/", $env, "/", $stem, ".txt")))),*]
    };
}

const BUILTIN: &[(&str, &str, &str)] = builtin![
    "tictactoe" / "tictactoe_policy_inference",
    "tictactoe" / "tictactoe_policy_improvement",
    "tictactoe" / "tictactoe_policy_evaluation",
    "tictactoe" / "tictactoe_rollout_section",
    "tictactoe" / "tictactoe_candidate_evaluation",
    "tictactoe" / "tictactoe_value_query",
    "tictactoe" / "tictactoe_state_value",
    "tictactoe" / "tictactoe_td",
    "tictactoe" / "tictactoe_td_variation",
    "frozenlake" / "frozenlake_value",
    "frozenlake" / "frozenlake_rollout_section",
    "frozenlake" / "frozenlake_candidate_evaluation",
    "frozenlake" / "frozenlake_value_query",
    "frozenlake" / "frozenlake_policy_improvement",
    "frozenlake" / "frozenlake_policy_inference",
    "breakthrough" / "breakthrough_eval",
    "breakthrough" / "breakthrough_td",
    "breakthrough" / "breakthrough_variation",
    "breakthrough" / "breakthrough_subsequent",
    "maze" / "maze_value",
    "maze" / "maze_td_g2",
    "maze" / "maze_variation",
    "maze" / "maze_policy_improvement",
    "maze" / "maze_policy_inference",
];

/// Template ids the pipelines reference, per environment.
pub fn required_templates(env: EnvKind) -> &'static [&'static str] {
    match env {
        EnvKind::TicTacToe => &[
            "tictactoe_policy_inference",
            "tictactoe_policy_improvement",
            "tictactoe_policy_evaluation",
            "tictactoe_rollout_section",
            "tictactoe_candidate_evaluation",
            "tictactoe_value_query",
            "tictactoe_state_value",
            "tictactoe_td",
            "tictactoe_td_variation",
        ],
        EnvKind::FrozenLake => &[
            "frozenlake_value",
            "frozenlake_rollout_section",
            "frozenlake_candidate_evaluation",
            "frozenlake_value_query",
            "frozenlake_policy_improvement",
            "frozenlake_policy_inference",
        ],
        EnvKind::Breakthrough => &[
            "breakthrough_eval",
            "breakthrough_td",
            "breakthrough_variation",
            "breakthrough_subsequent",
        ],
        EnvKind::Maze => &[
            "maze_value",
            "maze_td_g2",
            "maze_variation",
            "maze_policy_improvement",
            "maze_policy_inference",
        ],
    }
}

/// Immutable id → template map.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, Arc<PromptTemplate>>,
}

impl TemplateRegistry {
    pub fn builtin() -> Arc<TemplateRegistry> {
        static REG: OnceLock<Arc<TemplateRegistry>> = OnceLock::new();
        REG.get_or_init(|| {
            let mut templates = BTreeMap::new();
            for (env, stem, text) in BUILTIN {
                let env: EnvKind = env.parse().expect("builtin env dir");
                let t = PromptTemplate::parse(stem, env, text).expect("builtin templates parse");
                templates.insert(stem.to_string(), Arc::new(t));
            }
            Arc::new(TemplateRegistry { templates })
        })
        .clone()
    }

    /// Loads `<dir>/<env>/<id>.txt` files.
    pub fn load_dir(dir: &Path) -> Result<TemplateRegistry, PromptError> {
        let io = |e: std::io::Error| PromptError::Io(format!("{}: {e}", dir.display()));
        let mut templates = BTreeMap::new();
        let mut env_dirs: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .collect::<Result<_, _>>()
            .map_err(io)?;
        env_dirs.sort_by_key(|e| e.path());
        for entry in env_dirs {
            let path = entry.path();
            if !path.is_dir() {
                continue;
            }
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let Ok(env) = name.parse::<EnvKind>() else {
                continue;
            };
            let mut files: Vec<_> = std::fs::read_dir(&path)
                .map_err(io)?
                .collect::<Result<_, _>>()
                .map_err(io)?;
            files.sort_by_key(|e| e.path());
            for f in files {
                let p = f.path();
                if p.extension().and_then(|e| e.to_str()) != Some("txt") {
                    continue;
                }
                let id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let text = std::fs::read_to_string(&p).map_err(io)?;
                templates.insert(id.clone(), Arc::new(PromptTemplate::parse(&id, env, &text)?));
            }
        }
        Ok(TemplateRegistry { templates })
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(id)
            .map(|t| t.as_ref())
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(&self, id: &str, slots: &Slots) -> Result<Vec<ChatTurn>, PromptError> {
        self.get(id)?.render(slots)
    }

    pub fn render_text(&self, id: &str, slots: &Slots) -> Result<String, PromptError> {
        self.get(id)?.render_text(slots)
    }

    /// Fails with `UnknownTemplate` for the first missing required id.
    pub fn check_env(&self, env: EnvKind) -> Result<(), PromptError> {
        for id in required_templates(env) {
            self.get(id)?;
        }
        Ok(())
    }

    /// Finds the prompt template that produced `turns`.
    /// When several templates match, the one with the most literal text wins.
    pub fn identify(&self, turns: &[ChatTurn]) -> Option<(&PromptTemplate, Slots)> {
        self.templates
            .values()
            .filter(|t| t.kind != ReplyKind::Fragment && t.sections.len() == turns.len())
            .filter_map(|t| t.extract(turns).map(|s| (t.as_ref(), s)))
            .max_by_key(|(t, _)| t.literal_len())
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.templates.iter().map(|(k, t)| (k.clone(), t.checksum())).collect()
    }
}
