//! Language-valued reinforcement learning: text MDPs, scalar oracles,
//! chat backends, prompt templates, language value operators and the
//! pipelines that turn them into supervised training data.

pub mod env_core;
pub mod environments;
pub mod harness;
pub mod lm_backend;
pub mod oracles;
pub mod pipelines;
pub mod prompt_kit;
pub mod util;
pub mod value_ops;
