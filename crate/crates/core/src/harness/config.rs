//! Run configuration: sectioned `key = value` text with `include` and
//! named profiles.
//!
//! ```text
//! profile = tictactoe_ac
//! include = common.cfg
//!
//! [run]
//! seed = 7
//!
//! [backend.policy]
//! kind = http
//! base_url = http://localhost:8000
//! ```
//!
//! Included files are applied first, in order; keys in the including file
//! override them. Paths inside the file are taken relative to the working
//! directory, except `include`, which is relative to the including file.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::env_core::{EnvKind, Player};
use crate::environments::maze::MazeLayout;
use crate::environments::{frozenlake, maze, EnvSpec, OpponentKind};
use crate::lm_backend::{BackendConfig, BackendKind, OracleOptions, PolicyMode, SamplingParams, ValueMode};
use crate::oracles::mcts::MctsConfig;
use crate::pipelines::{AcConfig, Distinctness, EvalConfig, GpiConfig, PipelineKind, RolloutPolicy, ValueQueryMode};
use crate::prompt_kit::TemplateRegistry;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{path}:{line}: {msg}")]
    Syntax { path: String, line: usize, msg: String },
    #[error("include cycle through {0}")]
    IncludeCycle(String),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key `{key}` in [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("[{section}] {key} = `{value}`: {msg}")]
    BadValue {
        section: String,
        key: String,
        value: String,
        msg: String,
    },
    #[error("unknown profile `{0}`; known: {known}", known = PROFILES.join(", "))]
    UnknownProfile(String),
    #[error("{0}")]
    Invalid(String),
}

/// Section name to key/value pairs. The unnamed leading section is `""`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawConfig {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    fn merge(&mut self, other: RawConfig) {
        for (name, keys) in other.sections {
            self.sections.entry(name).or_default().extend(keys);
        }
    }

    pub fn parse_file(path: &Path) -> Result<RawConfig, ConfigError> {
        let mut stack = Vec::new();
        parse_file_inner(path, &mut stack)
    }

    /// Parses text whose includes resolve against `base`.
    pub fn parse_str(text: &str, origin: &str, base: &Path) -> Result<RawConfig, ConfigError> {
        let mut stack = Vec::new();
        parse_text(text, origin, base, &mut stack)
    }
}

fn parse_file_inner(path: &Path, stack: &mut Vec<PathBuf>) -> Result<RawConfig, ConfigError> {
    let io = |e: std::io::Error| ConfigError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let canonical = path.canonicalize().map_err(io)?;
    if stack.contains(&canonical) {
        return Err(ConfigError::IncludeCycle(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(io)?;
    stack.push(canonical);
    let base = path.parent().unwrap_or(Path::new("."));
    let raw = parse_text(&text, &path.display().to_string(), base, stack);
    stack.pop();
    raw
}

fn parse_text(text: &str, origin: &str, base: &Path, stack: &mut Vec<PathBuf>) -> Result<RawConfig, ConfigError> {
    let syntax = |line: usize, msg: &str| ConfigError::Syntax {
        path: origin.to_string(),
        line,
        msg: msg.to_string(),
    };
    let mut own = RawConfig::default();
    let mut includes = Vec::new();
    let mut section = String::new();
    own.sections.insert(section.clone(), BTreeMap::new());
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| syntax(n, "unterminated section header"))?;
            section = name.trim().to_ascii_lowercase();
            if section.is_empty() {
                return Err(syntax(n, "empty section name"));
            }
            own.sections.entry(section.clone()).or_default();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(n, "expected `key = value`"))?;
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(syntax(n, "empty key"));
        }
        if key == "include" && section.is_empty() {
            includes.push(base.join(&value));
            continue;
        }
        let keys = own.sections.entry(section.clone()).or_default();
        if keys.insert(key.clone(), value).is_some() {
            return Err(syntax(n, &format!("duplicate key `{key}`")));
        }
    }
    let mut raw = RawConfig::default();
    for inc in includes {
        raw.merge(parse_file_inner(&inc, stack)?);
    }
    raw.merge(own);
    Ok(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Live,
    Record,
    Replay,
}

impl RunMode {
    fn name(self) -> &'static str {
        match self {
            RunMode::Live => "live",
            RunMode::Record => "record",
            RunMode::Replay => "replay",
        }
    }
}

impl FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "live" => Ok(RunMode::Live),
            "record" => Ok(RunMode::Record),
            "replay" => Ok(RunMode::Replay),
            _ => Err("expected live, record or replay".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub pipeline: PipelineKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub iterations: u32,
    pub parallel: usize,
    pub mode: RunMode,
    /// Defaults to `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Template directory; the built-in set when absent.
    pub templates: Option<PathBuf>,
    /// Stand in for fine-tuning between iterations by memorising each
    /// emitted set in front of the policy and value backends.
    pub absorb: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSection {
    pub kind: EnvKind,
    /// Maze layout name or file.
    pub layout: String,
    /// FrozenLake rows separated by `/`.
    pub map: String,
    pub slippery: bool,
    /// 0 keeps the environment's default.
    pub step_cap: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSource {
    Oracle(OracleOptions),
    Http {
        base_url: String,
        model: String,
        api_key_env: Option<String>,
        timeout_secs: u64,
        max_retries: u32,
    },
    Mock {
        script: String,
    },
    Replay {
        cache_dir: String,
        strict: bool,
    },
}

impl BackendSource {
    fn kind_name(&self) -> &'static str {
        match self {
            BackendSource::Oracle(_) => "oracle",
            BackendSource::Http { .. } => "http",
            BackendSource::Mock { .. } => "mock",
            BackendSource::Replay { .. } => "replay",
        }
    }

    fn default_for(kind: &str) -> Option<BackendSource> {
        Some(match kind {
            "oracle" => BackendSource::Oracle(OracleOptions::default()),
            "http" => BackendSource::Http {
                base_url: "http://127.0.0.1:8000".into(),
                model: "default".into(),
                api_key_env: None,
                timeout_secs: 120,
                max_retries: 3,
            },
            "mock" => BackendSource::Mock { script: String::new() },
            "replay" => BackendSource::Replay {
                cache_dir: String::new(),
                strict: true,
            },
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendSpec {
    pub source: BackendSource,
    pub max_in_flight: usize,
}

impl BackendSpec {
    pub fn oracle(options: OracleOptions) -> Self {
        BackendSpec {
            source: BackendSource::Oracle(options),
            max_in_flight: 64,
        }
    }

    /// The library-level config; oracle backends learn the environment here.
    pub fn to_backend_config(&self, env: &EnvSection) -> BackendConfig {
        let kind = match &self.source {
            BackendSource::Oracle(o) => BackendKind::Oracle {
                env_kind: env.kind,
                options: OracleOptions {
                    maze_layout: (env.kind == EnvKind::Maze).then(|| env.layout.clone()),
                    ..o.clone()
                },
            },
            BackendSource::Http {
                base_url,
                model,
                api_key_env,
                timeout_secs,
                max_retries,
            } => BackendKind::Http {
                base_url: base_url.clone(),
                model_name: model.clone(),
                api_key_env: api_key_env.clone(),
                timeout_secs: *timeout_secs,
                max_retries: *max_retries,
            },
            BackendSource::Mock { script } => BackendKind::Mock {
                script_path: script.clone(),
            },
            BackendSource::Replay { cache_dir, strict } => BackendKind::Replay {
                cache_dir: cache_dir.clone(),
                strict: *strict,
            },
        };
        BackendConfig {
            kind,
            max_in_flight: self.max_in_flight,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backends {
    pub policy: BackendSpec,
    pub value: BackendSpec,
    pub aggregator: BackendSpec,
    /// Falls back to `policy` when absent.
    pub improver: Option<BackendSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpiSection {
    pub variations: usize,
    pub lookahead_steps: usize,
    pub rollout_policy: RolloutPolicy,
    pub eval_starts: usize,
    pub seeds_per_start: usize,
    pub ablation: bool,
    pub grid_k: Vec<usize>,
    pub grid_n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdSection {
    pub lookahead: usize,
    pub variations: usize,
    pub distinctness: Distinctness,
    pub rollout_policy: OpponentKind,
    pub sim_grid: Vec<u32>,
    pub rollout_grid: Vec<u32>,
    pub games_per_pair: usize,
    /// Cap on training states; 0 keeps all.
    pub max_states: usize,
    /// Score the value backend on labelled test states after each iteration.
    pub accuracy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcSection {
    pub trajectories: usize,
    pub k_mc: usize,
    pub n_sample: usize,
    pub m: usize,
    pub k_buffer: usize,
    pub value_query: ValueQueryMode,
    pub agent: Player,
    pub alternate_sides: bool,
    pub opponent: OpponentKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// Games per evaluation; 0 skips evaluation after training iterations.
    pub games: usize,
    pub opponent: OpponentKind,
    pub agent: Player,
    pub alternate_sides: bool,
    /// Advantage labels for value accuracy; generated when absent.
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSection {
    pub rollouts: u32,
    pub threshold: f64,
    pub policy: OpponentKind,
    /// Cap on labelled test states; 0 keeps all.
    pub states: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Option<String>,
    pub run: RunSection,
    pub env: EnvSection,
    pub sampling: SamplingParams,
    pub retry_budget: u32,
    pub backends: Backends,
    pub gpi: GpiSection,
    pub td: TdSection,
    pub actor_critic: AcSection,
    pub evaluate: EvalSection,
    pub labels: LabelSection,
}

pub const PROFILES: [&str; 5] = [
    "tictactoe_ac",
    "frozenlake_ac",
    "maze_gpi",
    "breakthrough_td",
    "breakthrough_eval",
];

const FULL_SIM_GRID: [u32; 4] = [2, 10, 100, 1000];
const FULL_ROLLOUT_GRID: [u32; 4] = [1, 10, 100, 1000];

fn oracle_with(policy: PolicyMode, value: ValueMode) -> BackendSpec {
    BackendSpec::oracle(OracleOptions {
        policy,
        value,
        ..OracleOptions::default()
    })
}

impl Default for RunConfig {
    fn default() -> Self {
        let ac = AcConfig::default();
        let gpi = GpiConfig::default();
        RunConfig {
            profile: None,
            run: RunSection {
                pipeline: PipelineKind::ActorCritic,
                seed: 0,
                output_dir: PathBuf::from("runs/default"),
                iterations: 1,
                parallel: 8,
                mode: RunMode::Live,
                cache_dir: None,
                templates: None,
                absorb: false,
            },
            env: EnvSection {
                kind: EnvKind::TicTacToe,
                layout: "toy".into(),
                map: frozenlake::DEFAULT_LAYOUT.replace('\n', "/"),
                slippery: false,
                step_cap: 0,
            },
            sampling: SamplingParams::default(),
            retry_budget: 2,
            backends: Backends {
                policy: oracle_with(PolicyMode::Optimal, ValueMode::Exact),
                value: oracle_with(PolicyMode::Optimal, ValueMode::Exact),
                aggregator: oracle_with(PolicyMode::Optimal, ValueMode::Aggregate),
                improver: None,
            },
            gpi: GpiSection {
                variations: gpi.variations,
                lookahead_steps: gpi.lookahead_steps,
                rollout_policy: gpi.rollout_policy,
                eval_starts: gpi.eval_starts,
                seeds_per_start: gpi.seeds_per_start,
                ablation: false,
                grid_k: vec![1, 4, 6, 8],
                grid_n: vec![1, 3],
            },
            td: TdSection {
                lookahead: 4,
                variations: 4,
                distinctness: Distinctness::FullSequence,
                rollout_policy: OpponentKind::UniformRandom,
                sim_grid: vec![2, 10],
                rollout_grid: vec![1, 10],
                games_per_pair: 1,
                max_states: 0,
                accuracy: false,
            },
            actor_critic: AcSection {
                trajectories: ac.trajectories,
                k_mc: ac.k_mc,
                n_sample: ac.n_sample,
                m: ac.m,
                k_buffer: ac.k_buffer,
                value_query: ac.value_query,
                agent: ac.agent,
                alternate_sides: ac.alternate_sides,
                opponent: ac.opponent,
            },
            evaluate: EvalSection {
                games: 1000,
                opponent: OpponentKind::UniformRandom,
                agent: Player::O,
                alternate_sides: false,
                labels: None,
            },
            labels: LabelSection {
                rollouts: 100,
                threshold: 0.55,
                policy: OpponentKind::UniformRandom,
                states: 0,
            },
        }
    }
}

impl RunConfig {
    /// Defaults of a named experiment.
    pub fn profile(name: &str) -> Result<RunConfig, ConfigError> {
        let mut c = RunConfig {
            profile: Some(name.to_string()),
            ..RunConfig::default()
        };
        let strong_mcts = OpponentKind::Mcts(MctsConfig::new(1000, 100));
        match name {
            "tictactoe_ac" | "frozenlake_ac" => {
                c.run.pipeline = PipelineKind::ActorCritic;
                c.run.iterations = 3;
                c.run.parallel = 64;
                c.run.absorb = true;
                c.run.output_dir = PathBuf::from(format!("runs/{name}"));
                c.env.kind = if name == "tictactoe_ac" {
                    EnvKind::TicTacToe
                } else {
                    EnvKind::FrozenLake
                };
                c.env.slippery = name == "frozenlake_ac";
                c.backends.policy = oracle_with(PolicyMode::Random, ValueMode::Exact);
                c.backends.improver = Some(oracle_with(PolicyMode::Optimal, ValueMode::Exact));
            }
            "maze_gpi" => {
                c.run.pipeline = PipelineKind::Gpi;
                c.run.output_dir = PathBuf::from("runs/maze_gpi");
                c.env.kind = EnvKind::Maze;
                c.env.layout = "double_t".into();
                c.gpi.ablation = true;
            }
            "breakthrough_td" => {
                c.run.pipeline = PipelineKind::TdTrain;
                c.run.parallel = 192;
                c.run.output_dir = PathBuf::from("runs/breakthrough_td");
                c.env.kind = EnvKind::Breakthrough;
                c.td.rollout_policy = strong_mcts.clone();
                c.td.sim_grid = FULL_SIM_GRID.to_vec();
                c.td.rollout_grid = FULL_ROLLOUT_GRID.to_vec();
                c.td.accuracy = true;
                c.labels.policy = strong_mcts;
                c.labels.states = 3000;
            }
            "breakthrough_eval" => {
                c.run.pipeline = PipelineKind::Evaluate;
                c.run.parallel = 192;
                c.run.output_dir = PathBuf::from("runs/breakthrough_eval");
                c.env.kind = EnvKind::Breakthrough;
                c.td.sim_grid = FULL_SIM_GRID.to_vec();
                c.td.rollout_grid = FULL_ROLLOUT_GRID.to_vec();
                c.labels.policy = strong_mcts;
                c.labels.states = 3000;
            }
            other => return Err(ConfigError::UnknownProfile(other.to_string())),
        }
        Ok(c)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<RunConfig, ConfigError> {
        let top = raw.sections.get("").cloned().unwrap_or_default();
        let mut cfg = match top.get("profile").map(String::as_str) {
            Some(p) if !p.is_empty() => RunConfig::profile(p)?,
            _ => RunConfig::default(),
        };
        if let Some(k) = top.keys().find(|k| *k != "profile") {
            return Err(ConfigError::UnknownKey {
                section: String::new(),
                key: k.clone(),
            });
        }
        for (section, keys) in &raw.sections {
            match section.as_str() {
                "" => {}
                s if s.starts_with("backend.") => cfg.apply_backend(s, keys)?,
                s => {
                    for (k, v) in keys {
                        cfg.apply(s, k, v)?;
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig, ConfigError> {
        RunConfig::from_raw(&RawConfig::parse_file(path)?)
    }

    pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::from_raw(&RawConfig::parse_str(text, "<string>", Path::new("."))?)
    }

    /// Applies one `section.key = value` override.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<(), ConfigError> {
        let (section, key) = dotted
            .rsplit_once('.')
            .ok_or_else(|| ConfigError::Invalid(format!("override `{dotted}` is not section.key")))?;
        if section.starts_with("backend.") {
            let keys = BTreeMap::from([(key.to_string(), value.to_string())]);
            self.apply_backend(section, &keys)
        } else {
            self.apply(section, key, value)
        }
    }

    fn apply(&mut self, section: &str, key: &str, v: &str) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::BadValue {
            section: section.into(),
            key: key.into(),
            value: v.into(),
            msg,
        };
        let unknown = || ConfigError::UnknownKey {
            section: section.into(),
            key: key.into(),
        };
        macro_rules! val {
            () => {
                parse_val(v).map_err(bad)?
            };
        }
        match section {
            "run" => match key {
                "pipeline" => {
                    self.run.pipeline = v
                        .parse()
                        .map_err(|e: crate::pipelines::PipelineError| bad(e.to_string()))?
                }
                "seed" => self.run.seed = val!(),
                "output_dir" => self.run.output_dir = PathBuf::from(v),
                "iterations" => self.run.iterations = val!(),
                "parallel" => self.run.parallel = val!(),
                "mode" => self.run.mode = v.parse().map_err(bad)?,
                "cache_dir" => self.run.cache_dir = opt_path(v),
                "templates" => self.run.templates = opt_path(v),
                "absorb" => self.run.absorb = parse_bool(v).map_err(bad)?,
                _ => return Err(unknown()),
            },
            "env" => match key {
                "kind" => self.env.kind = v.parse().map_err(|e: crate::env_core::EnvError| bad(e.to_string()))?,
                "layout" => self.env.layout = v.to_string(),
                "map" => self.env.map = v.to_string(),
                "slippery" => self.env.slippery = parse_bool(v).map_err(bad)?,
                "step_cap" => self.env.step_cap = val!(),
                _ => return Err(unknown()),
            },
            "sampling" => match key {
                "temperature" => self.sampling.temperature = val!(),
                "top_k" => self.sampling.top_k = val!(),
                "top_p" => self.sampling.top_p = val!(),
                "max_tokens" => self.sampling.max_tokens = val!(),
                "retry_budget" => self.retry_budget = val!(),
                _ => return Err(unknown()),
            },
            "gpi" => match key {
                "variations" => self.gpi.variations = val!(),
                "lookahead_steps" => self.gpi.lookahead_steps = val!(),
                "rollout_policy" => self.gpi.rollout_policy = parse_rollout_policy(v).map_err(bad)?,
                "eval_starts" => self.gpi.eval_starts = val!(),
                "seeds_per_start" => self.gpi.seeds_per_start = val!(),
                "ablation" => self.gpi.ablation = parse_bool(v).map_err(bad)?,
                "grid_k" => self.gpi.grid_k = parse_list(v).map_err(bad)?,
                "grid_n" => self.gpi.grid_n = parse_list(v).map_err(bad)?,
                _ => return Err(unknown()),
            },
            "td" => match key {
                "lookahead" => self.td.lookahead = val!(),
                "variations" => self.td.variations = val!(),
                "distinctness" => self.td.distinctness = parse_distinctness(v).map_err(bad)?,
                "rollout_policy" => self.td.rollout_policy = parse_policy(v).map_err(bad)?,
                "sim_grid" => self.td.sim_grid = parse_list(v).map_err(bad)?,
                "rollout_grid" => self.td.rollout_grid = parse_list(v).map_err(bad)?,
                "games_per_pair" => self.td.games_per_pair = val!(),
                "max_states" => self.td.max_states = val!(),
                "accuracy" => self.td.accuracy = parse_bool(v).map_err(bad)?,
                _ => return Err(unknown()),
            },
            "actor_critic" => match key {
                "trajectories" => self.actor_critic.trajectories = val!(),
                "k_mc" => self.actor_critic.k_mc = val!(),
                "n_sample" => self.actor_critic.n_sample = val!(),
                "m" => self.actor_critic.m = val!(),
                "k_buffer" => self.actor_critic.k_buffer = val!(),
                "value_query" => self.actor_critic.value_query = parse_value_query(v).map_err(bad)?,
                "agent" => self.actor_critic.agent = parse_player(v).map_err(bad)?,
                "alternate_sides" => self.actor_critic.alternate_sides = parse_bool(v).map_err(bad)?,
                "opponent" => self.actor_critic.opponent = parse_policy(v).map_err(bad)?,
                _ => return Err(unknown()),
            },
            "evaluate" => match key {
                "games" => self.evaluate.games = val!(),
                "opponent" => self.evaluate.opponent = parse_policy(v).map_err(bad)?,
                "agent" => self.evaluate.agent = parse_player(v).map_err(bad)?,
                "alternate_sides" => self.evaluate.alternate_sides = parse_bool(v).map_err(bad)?,
                "labels" => self.evaluate.labels = opt_path(v),
                _ => return Err(unknown()),
            },
            "labels" => match key {
                "rollouts" => self.labels.rollouts = val!(),
                "threshold" => self.labels.threshold = val!(),
                "policy" => self.labels.policy = parse_policy(v).map_err(bad)?,
                "states" => self.labels.states = val!(),
                _ => return Err(unknown()),
            },
            other => return Err(ConfigError::UnknownSection(other.to_string())),
        }
        Ok(())
    }

    fn apply_backend(&mut self, section: &str, keys: &BTreeMap<String, String>) -> Result<(), ConfigError> {
        let role = &section["backend.".len()..];
        let slot: &mut BackendSpec = match role {
            "policy" => &mut self.backends.policy,
            "value" => &mut self.backends.value,
            "aggregator" => &mut self.backends.aggregator,
            "improver" => self
                .backends
                .improver
                .get_or_insert_with(|| oracle_with(PolicyMode::Optimal, ValueMode::Exact)),
            _ => return Err(ConfigError::UnknownSection(section.to_string())),
        };
        apply_backend_keys(slot, section, keys)
    }

    pub fn improver(&self) -> &BackendSpec {
        self.backends.improver.as_ref().unwrap_or(&self.backends.policy)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.run
            .cache_dir
            .clone()
            .unwrap_or_else(|| self.run.output_dir.join("cache"))
    }

    pub fn env_spec(&self) -> Result<EnvSpec, ConfigError> {
        let invalid = |e: crate::env_core::EnvError| ConfigError::Invalid(format!("[env]: {e}"));
        let spec = match self.env.kind {
            EnvKind::TicTacToe => EnvSpec::TicTacToe,
            EnvKind::Breakthrough => EnvSpec::Breakthrough,
            EnvKind::FrozenLake => EnvSpec::FrozenLake {
                map: self.env.map.replace('/', "\n"),
                slippery: self.env.slippery,
                step_cap: if self.env.step_cap == 0 {
                    frozenlake::DEFAULT_STEP_CAP
                } else {
                    self.env.step_cap
                },
            },
            EnvKind::Maze => EnvSpec::Maze {
                layout: Arc::new(MazeLayout::load(&self.env.layout).map_err(invalid)?),
                step_cap: if self.env.step_cap == 0 {
                    maze::DEFAULT_STEP_CAP
                } else {
                    self.env.step_cap
                },
            },
        };
        spec.validate().map_err(invalid)?;
        Ok(spec)
    }

    pub fn registry(&self) -> Result<Arc<TemplateRegistry>, ConfigError> {
        let reg = match &self.run.templates {
            None => TemplateRegistry::builtin(),
            Some(dir) => {
                Arc::new(TemplateRegistry::load_dir(dir).map_err(|e| ConfigError::Invalid(format!("templates: {e}")))?)
            }
        };
        reg.check_env(self.env.kind)
            .map_err(|e| ConfigError::Invalid(format!("templates for {}: {e}", self.env.kind)))?;
        Ok(reg)
    }

    pub fn gpi_config(&self) -> GpiConfig {
        GpiConfig {
            variations: self.gpi.variations,
            lookahead_steps: self.gpi.lookahead_steps,
            rollout_policy: self.gpi.rollout_policy,
            eval_starts: self.gpi.eval_starts,
            seeds_per_start: self.gpi.seeds_per_start,
            seed: self.run.seed,
            parallel: self.run.parallel,
        }
    }

    pub fn ac_config(&self) -> AcConfig {
        let a = &self.actor_critic;
        AcConfig {
            trajectories: a.trajectories,
            k_mc: a.k_mc,
            n_sample: a.n_sample,
            m: a.m,
            k_buffer: a.k_buffer,
            value_query: a.value_query,
            agent: a.agent,
            alternate_sides: a.alternate_sides,
            opponent: a.opponent.clone(),
            seed: self.run.seed,
            parallel: self.run.parallel,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_games: self.evaluate.games,
            agent: self.evaluate.agent,
            alternate_sides: self.evaluate.alternate_sides,
            opponent: self.evaluate.opponent.clone(),
            seed: self.run.seed,
            parallel: self.run.parallel,
        }
    }

    /// Everything checkable without contacting a backend.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.run.iterations == 0 || self.run.parallel == 0 {
            return invalid("iterations and parallel must be positive".into());
        }
        self.env_spec()?;
        self.registry()?;
        self.sampling
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("[sampling]: {e}")))?;
        let pipeline =
            |e: crate::pipelines::PipelineError| ConfigError::Invalid(format!("[{}]: {e}", self.run.pipeline));
        let kind = self.env.kind;
        match self.run.pipeline {
            PipelineKind::Gpi => {
                if kind != EnvKind::Maze {
                    return invalid(format!("gpi runs on a maze, not {kind}"));
                }
                self.gpi_config().validate().map_err(pipeline)?;
                if self.gpi.ablation && (self.gpi.grid_k.contains(&0) || self.gpi.grid_n.contains(&0)) {
                    return invalid("[gpi] grid entries must be positive".into());
                }
                if self.gpi.ablation && (self.gpi.grid_k.is_empty() || self.gpi.grid_n.is_empty()) {
                    return invalid("[gpi] ablation grids must be non-empty".into());
                }
            }
            PipelineKind::TdTrain => {
                if kind != EnvKind::Breakthrough {
                    return invalid(format!("td_train runs on breakthrough, not {kind}"));
                }
                self.check_td()?;
            }
            PipelineKind::ActorCritic => {
                self.ac_config().validate(kind).map_err(pipeline)?;
                check_policy(&self.actor_critic.opponent)?;
            }
            PipelineKind::Evaluate => {
                if kind == EnvKind::Breakthrough {
                    match &self.evaluate.labels {
                        Some(p) if !p.is_file() => return invalid(format!("labels file {} not found", p.display())),
                        Some(_) => {}
                        None => self.check_td()?,
                    }
                } else if self.evaluate.games == 0 {
                    return invalid("[evaluate] games must be positive".into());
                }
            }
        }
        if matches!(self.run.pipeline, PipelineKind::ActorCritic | PipelineKind::Evaluate) {
            check_policy(&self.evaluate.opponent)?;
        }
        if !(0.5..1.0).contains(&self.labels.threshold) || self.labels.rollouts == 0 {
            return invalid("[labels] threshold must lie in [0.5, 1) and rollouts be positive".into());
        }
        check_policy(&self.labels.policy)?;
        let mut roles = vec![
            ("policy", &self.backends.policy),
            ("value", &self.backends.value),
            ("aggregator", &self.backends.aggregator),
        ];
        if let Some(i) = &self.backends.improver {
            roles.push(("improver", i));
        }
        for (role, spec) in roles {
            spec.to_backend_config(&self.env)
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("[backend.{role}]: {e}")))?;
        }
        if self.run.mode == RunMode::Replay && !self.cache_dir().is_dir() {
            return invalid(format!("replay cache {} not found", self.cache_dir().display()));
        }
        Ok(())
    }

    fn check_td(&self) -> Result<(), ConfigError> {
        let t = &self.td;
        if t.lookahead == 0 || t.variations == 0 || t.games_per_pair == 0 {
            return Err(ConfigError::Invalid(
                "[td] lookahead, variations and games_per_pair must be positive".into(),
            ));
        }
        if t.sim_grid.is_empty() || t.rollout_grid.is_empty() || t.sim_grid.contains(&0) || t.rollout_grid.contains(&0)
        {
            return Err(ConfigError::Invalid("[td] grids must be non-empty and positive".into()));
        }
        check_policy(&t.rollout_policy)
    }

    /// Canonical text; parsing it yields this config again.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        if let Some(p) = &self.profile {
            let _ = writeln!(out, "profile = {p}");
        }
        let mut section = |name: &str, pairs: Vec<(&str, String)>| {
            let _ = writeln!(out, "\n[{name}]");
            for (k, v) in pairs {
                let _ = writeln!(out, "{k} = {v}");
            }
        };
        let r = &self.run;
        section(
            "run",
            vec![
                ("pipeline", r.pipeline.to_string()),
                ("seed", r.seed.to_string()),
                ("output_dir", r.output_dir.display().to_string()),
                ("iterations", r.iterations.to_string()),
                ("parallel", r.parallel.to_string()),
                ("mode", r.mode.name().into()),
                ("cache_dir", show_path(&r.cache_dir)),
                ("templates", show_path(&r.templates)),
                ("absorb", r.absorb.to_string()),
            ],
        );
        let e = &self.env;
        section(
            "env",
            vec![
                ("kind", e.kind.to_string()),
                ("layout", e.layout.clone()),
                ("map", e.map.clone()),
                ("slippery", e.slippery.to_string()),
                ("step_cap", e.step_cap.to_string()),
            ],
        );
        let s = &self.sampling;
        section(
            "sampling",
            vec![
                ("temperature", s.temperature.to_string()),
                ("top_k", s.top_k.to_string()),
                ("top_p", s.top_p.to_string()),
                ("max_tokens", s.max_tokens.to_string()),
                ("retry_budget", self.retry_budget.to_string()),
            ],
        );
        let mut roles = vec![
            ("backend.policy", &self.backends.policy),
            ("backend.value", &self.backends.value),
            ("backend.aggregator", &self.backends.aggregator),
        ];
        if let Some(i) = &self.backends.improver {
            roles.push(("backend.improver", i));
        }
        for (name, spec) in roles {
            section(name, backend_pairs(spec));
        }
        let g = &self.gpi;
        section(
            "gpi",
            vec![
                ("variations", g.variations.to_string()),
                ("lookahead_steps", g.lookahead_steps.to_string()),
                ("rollout_policy", show_rollout_policy(g.rollout_policy).into()),
                ("eval_starts", g.eval_starts.to_string()),
                ("seeds_per_start", g.seeds_per_start.to_string()),
                ("ablation", g.ablation.to_string()),
                ("grid_k", show_list(&g.grid_k)),
                ("grid_n", show_list(&g.grid_n)),
            ],
        );
        let t = &self.td;
        section(
            "td",
            vec![
                ("lookahead", t.lookahead.to_string()),
                ("variations", t.variations.to_string()),
                ("distinctness", show_distinctness(t.distinctness).into()),
                ("rollout_policy", show_policy(&t.rollout_policy)),
                ("sim_grid", show_list(&t.sim_grid)),
                ("rollout_grid", show_list(&t.rollout_grid)),
                ("games_per_pair", t.games_per_pair.to_string()),
                ("max_states", t.max_states.to_string()),
                ("accuracy", t.accuracy.to_string()),
            ],
        );
        let a = &self.actor_critic;
        section(
            "actor_critic",
            vec![
                ("trajectories", a.trajectories.to_string()),
                ("k_mc", a.k_mc.to_string()),
                ("n_sample", a.n_sample.to_string()),
                ("m", a.m.to_string()),
                ("k_buffer", a.k_buffer.to_string()),
                ("value_query", show_value_query(a.value_query).into()),
                ("agent", a.agent.label().into()),
                ("alternate_sides", a.alternate_sides.to_string()),
                ("opponent", show_policy(&a.opponent)),
            ],
        );
        let v = &self.evaluate;
        section(
            "evaluate",
            vec![
                ("games", v.games.to_string()),
                ("opponent", show_policy(&v.opponent)),
                ("agent", v.agent.label().into()),
                ("alternate_sides", v.alternate_sides.to_string()),
                ("labels", show_path(&v.labels)),
            ],
        );
        let l = &self.labels;
        section(
            "labels",
            vec![
                ("rollouts", l.rollouts.to_string()),
                ("threshold", l.threshold.to_string()),
                ("policy", show_policy(&l.policy)),
                ("states", l.states.to_string()),
            ],
        );
        out
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_ini())
    }
}

fn apply_backend_keys(
    slot: &mut BackendSpec,
    section: &str,
    keys: &BTreeMap<String, String>,
) -> Result<(), ConfigError> {
    if let Some(kind) = keys.get("kind") {
        if kind != slot.source.kind_name() {
            slot.source = BackendSource::default_for(kind).ok_or_else(|| ConfigError::BadValue {
                section: section.into(),
                key: "kind".into(),
                value: kind.clone(),
                msg: "expected oracle, http, mock or replay".into(),
            })?;
        }
    }
    let kind_name = slot.source.kind_name();
    for (key, v) in keys {
        let bad = |msg: String| ConfigError::BadValue {
            section: section.into(),
            key: key.clone(),
            value: v.clone(),
            msg,
        };
        let mismatch = || ConfigError::BadValue {
            section: section.into(),
            key: key.clone(),
            value: v.clone(),
            msg: format!("not a {kind_name} backend setting"),
        };
        match key.as_str() {
            "kind" => {}
            "max_in_flight" => slot.max_in_flight = parse_val(v).map_err(bad)?,
            _ => match &mut slot.source {
                BackendSource::Oracle(o) => match key.as_str() {
                    "policy_mode" => o.policy = parse_policy_mode(v).map_err(bad)?,
                    "value_mode" => o.value = parse_value_mode(v).map_err(bad)?,
                    "label_rollouts" => o.label_rollouts = parse_val(v).map_err(bad)?,
                    "label_threshold" => o.label_threshold = parse_val(v).map_err(bad)?,
                    "label_seed" => o.label_seed = parse_val(v).map_err(bad)?,
                    "malformed_rate" => o.malformed_rate = parse_val(v).map_err(bad)?,
                    "latency_ms" => o.latency_ms = parse_val(v).map_err(bad)?,
                    _ => return Err(mismatch()),
                },
                BackendSource::Http {
                    base_url,
                    model,
                    api_key_env,
                    timeout_secs,
                    max_retries,
                } => match key.as_str() {
                    "base_url" => *base_url = v.clone(),
                    "model" => *model = v.clone(),
                    "api_key_env" => *api_key_env = (!v.is_empty()).then(|| v.clone()),
                    "timeout_secs" => *timeout_secs = parse_val(v).map_err(bad)?,
                    "max_retries" => *max_retries = parse_val(v).map_err(bad)?,
                    _ => return Err(mismatch()),
                },
                BackendSource::Mock { script } => match key.as_str() {
                    "script" => *script = v.clone(),
                    _ => return Err(mismatch()),
                },
                BackendSource::Replay { cache_dir, strict } => match key.as_str() {
                    "cache_dir" => *cache_dir = v.clone(),
                    "strict" => *strict = parse_bool(v).map_err(bad)?,
                    _ => return Err(mismatch()),
                },
            },
        }
    }
    Ok(())
}

fn backend_pairs(spec: &BackendSpec) -> Vec<(&'static str, String)> {
    let mut pairs = vec![("kind", spec.source.kind_name().to_string())];
    match &spec.source {
        BackendSource::Oracle(o) => pairs.extend([
            ("policy_mode", show_policy_mode(o.policy).to_string()),
            ("value_mode", show_value_mode(o.value)),
            ("label_rollouts", o.label_rollouts.to_string()),
            ("label_threshold", o.label_threshold.to_string()),
            ("label_seed", o.label_seed.to_string()),
            ("malformed_rate", o.malformed_rate.to_string()),
            ("latency_ms", o.latency_ms.to_string()),
        ]),
        BackendSource::Http {
            base_url,
            model,
            api_key_env,
            timeout_secs,
            max_retries,
        } => pairs.extend([
            ("base_url", base_url.clone()),
            ("model", model.clone()),
            ("api_key_env", api_key_env.clone().unwrap_or_default()),
            ("timeout_secs", timeout_secs.to_string()),
            ("max_retries", max_retries.to_string()),
        ]),
        BackendSource::Mock { script } => pairs.push(("script", script.clone())),
        BackendSource::Replay { cache_dir, strict } => {
            pairs.extend([("cache_dir", cache_dir.clone()), ("strict", strict.to_string())])
        }
    }
    pairs.push(("max_in_flight", spec.max_in_flight.to_string()));
    pairs
}

fn parse_val<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_val)
        .collect()
}

fn show_list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_player(v: &str) -> Result<Player, String> {
    match v {
        "O" | "o" => Ok(Player::O),
        "X" | "x" => Ok(Player::X),
        "White" | "white" => Ok(Player::White),
        "Black" | "black" => Ok(Player::Black),
        "agent" => Ok(Player::Agent),
        _ => Err("expected O, X, White, Black or agent".into()),
    }
}

fn parse_rollout_policy(v: &str) -> Result<RolloutPolicy, String> {
    match v {
        "uniform_random" => Ok(RolloutPolicy::UniformRandom),
        "language_policy" => Ok(RolloutPolicy::LanguagePolicy),
        _ => Err("expected uniform_random or language_policy".into()),
    }
}

fn show_rollout_policy(p: RolloutPolicy) -> &'static str {
    match p {
        RolloutPolicy::UniformRandom => "uniform_random",
        RolloutPolicy::LanguagePolicy => "language_policy",
    }
}

fn parse_distinctness(v: &str) -> Result<Distinctness, String> {
    match v {
        "full_sequence" => Ok(Distinctness::FullSequence),
        "first_action" => Ok(Distinctness::FirstAction),
        _ => Err("expected full_sequence or first_action".into()),
    }
}

fn show_distinctness(d: Distinctness) -> &'static str {
    match d {
        Distinctness::FullSequence => "full_sequence",
        Distinctness::FirstAction => "first_action",
    }
}

fn parse_value_query(v: &str) -> Result<ValueQueryMode, String> {
    match v {
        "state_action" => Ok(ValueQueryMode::StateAction),
        "successor" => Ok(ValueQueryMode::Successor),
        _ => Err("expected state_action or successor".into()),
    }
}

fn show_value_query(m: ValueQueryMode) -> &'static str {
    match m {
        ValueQueryMode::StateAction => "state_action",
        ValueQueryMode::Successor => "successor",
    }
}

fn parse_policy_mode(v: &str) -> Result<PolicyMode, String> {
    match v {
        "optimal" => Ok(PolicyMode::Optimal),
        "critic" => Ok(PolicyMode::Critic),
        "random" => Ok(PolicyMode::Random),
        _ => Err("expected optimal, critic or random".into()),
    }
}

fn show_policy_mode(m: PolicyMode) -> &'static str {
    match m {
        PolicyMode::Optimal => "optimal",
        PolicyMode::Critic => "critic",
        PolicyMode::Random => "random",
    }
}

fn parse_value_mode(v: &str) -> Result<ValueMode, String> {
    match v {
        "exact" => Ok(ValueMode::Exact),
        "aggregate" => Ok(ValueMode::Aggregate),
        "coin_flip" => Ok(ValueMode::CoinFlip),
        _ => match v.strip_prefix("constant:") {
            Some(c) => Ok(ValueMode::Constant(parse_val(c)?)),
            None => Err("expected exact, aggregate, coin_flip or constant:<value>".into()),
        },
    }
}

fn show_value_mode(m: ValueMode) -> String {
    match m {
        ValueMode::Exact => "exact".into(),
        ValueMode::Aggregate => "aggregate".into(),
        ValueMode::CoinFlip => "coin_flip".into(),
        ValueMode::Constant(c) => format!("constant:{c}"),
    }
}

/// `uniform_random`, `first_available` or `mcts:<sims>[:<rollouts>[:<seed>[:<uct_c>]]]`.
pub fn parse_policy(v: &str) -> Result<OpponentKind, String> {
    match v {
        "uniform_random" => Ok(OpponentKind::UniformRandom),
        "first_available" => Ok(OpponentKind::FirstAvailable),
        _ => {
            let Some(rest) = v.strip_prefix("mcts:") else {
                return Err("expected uniform_random, first_available or mcts:<sims>:<rollouts>".into());
            };
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() > 4 {
                return Err("too many mcts fields".into());
            }
            let mut c = MctsConfig::default();
            c.simulations = parse_val(parts[0])?;
            if let Some(r) = parts.get(1) {
                c.rollouts_per_eval = parse_val(r)?;
            }
            if let Some(s) = parts.get(2) {
                c.seed = parse_val(s)?;
            }
            if let Some(u) = parts.get(3) {
                c.uct_c = parse_val(u)?;
            }
            Ok(OpponentKind::Mcts(c))
        }
    }
}

pub fn show_policy(p: &OpponentKind) -> String {
    match p {
        OpponentKind::UniformRandom => "uniform_random".into(),
        OpponentKind::FirstAvailable => "first_available".into(),
        OpponentKind::Mcts(c) => format!("mcts:{}:{}:{}:{}", c.simulations, c.rollouts_per_eval, c.seed, c.uct_c),
    }
}

fn check_policy(p: &OpponentKind) -> Result<(), ConfigError> {
    if let OpponentKind::Mcts(c) = p {
        c.validate()
            .map_err(|e| ConfigError::Invalid(format!("mcts policy: {e}")))?;
    }
    Ok(())
}
