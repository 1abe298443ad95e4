//! Per-iteration checkpoint directories. `metrics.json` is written last and
//! marks the iteration complete.

use std::path::{Path, PathBuf};

use crate::env_core::{Trajectory, TrajectoryLine};
use crate::util::{atomic_write, read_jsonl, write_jsonl};

use super::trace::{TraceEvent, TraceLog};
use super::{IterationMetrics, PipelineError, SftExample, TrainingSet};

pub const CHECKPOINT_FILES: [&str; 5] = [
    "trajectories.jsonl",
    "value_sft.jsonl",
    "policy_sft.jsonl",
    "metrics.json",
    "trace.jsonl",
];

#[derive(Debug, Clone, PartialEq)]
pub struct IterationArtifacts {
    pub trajectories: Vec<Trajectory>,
    pub value_set: TrainingSet,
    pub policy_set: TrainingSet,
    pub metrics: IterationMetrics,
    pub trace: TraceLog,
}

pub fn iteration_dir(root: &Path, k: u32) -> PathBuf {
    root.join(format!("iteration_{k}"))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", path.display()))
}

impl IterationArtifacts {
    pub fn write(&self, root: &Path) -> Result<PathBuf, PipelineError> {
        let dir = iteration_dir(root, self.metrics.iteration);
        let lines: Vec<TrajectoryLine> = self.trajectories.iter().flat_map(Trajectory::to_lines).collect();
        let jsonl = |name: &str, res: std::io::Result<()>| res.map_err(|e| io_err(&dir.join(name), e));
        jsonl(
            "trajectories.jsonl",
            write_jsonl(&dir.join("trajectories.jsonl"), &lines),
        )?;
        jsonl(
            "value_sft.jsonl",
            write_jsonl(&dir.join("value_sft.jsonl"), &self.value_set.examples),
        )?;
        jsonl(
            "policy_sft.jsonl",
            write_jsonl(&dir.join("policy_sft.jsonl"), &self.policy_set.examples),
        )?;
        jsonl("trace.jsonl", write_jsonl(&dir.join("trace.jsonl"), &self.trace.events))?;
        let metrics = serde_json::to_string_pretty(&self.metrics).map_err(|e| io_err(&dir, e))? + "\n";
        let path = dir.join("metrics.json");
        atomic_write(&path, metrics.as_bytes()).map_err(|e| io_err(&path, e))?;
        Ok(dir)
    }

    /// Loads iteration `k`, or `None` when it never completed.
    pub fn read(root: &Path, k: u32) -> Result<Option<Self>, PipelineError> {
        let dir = iteration_dir(root, k);
        let metrics_path = dir.join("metrics.json");
        if !metrics_path.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
        let metrics: IterationMetrics = serde_json::from_str(&text).map_err(|e| io_err(&metrics_path, e))?;
        let load = |name: &str| dir.join(name);
        let lines: Vec<TrajectoryLine> =
            read_jsonl(&load("trajectories.jsonl")).map_err(|e| io_err(&load("trajectories.jsonl"), e))?;
        let value: Vec<SftExample> =
            read_jsonl(&load("value_sft.jsonl")).map_err(|e| io_err(&load("value_sft.jsonl"), e))?;
        let policy: Vec<SftExample> =
            read_jsonl(&load("policy_sft.jsonl")).map_err(|e| io_err(&load("policy_sft.jsonl"), e))?;
        let events: Vec<TraceEvent> = read_jsonl(&load("trace.jsonl")).map_err(|e| io_err(&load("trace.jsonl"), e))?;
        Ok(Some(IterationArtifacts {
            trajectories: Trajectory::from_lines(lines),
            value_set: TrainingSet::new(value),
            policy_set: TrainingSet::new(policy),
            metrics,
            trace: TraceLog { events },
        }))
    }
}

/// Number of leading iterations 0, 1, ... that completed.
pub fn completed_iterations(root: &Path) -> u32 {
    let mut k = 0;
    while iteration_dir(root, k).join("metrics.json").is_file() {
        k += 1;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_core::{rng_from, EnvKind, State};
    use crate::environments::tictactoe::TicTacToeBoard;
    use crate::lm_backend::ChatTurn;
    use crate::pipelines::trace::Phase;
    use crate::pipelines::{PipelineKind, SftTags};

    fn artifacts() -> IterationArtifacts {
        let s = State::TicTacToe(TicTacToeBoard::empty());
        let a = s.legal_actions().unwrap()[4].clone();
        let mut traj = Trajectory::new(3);
        traj.transitions.push(s.apply(&a, &mut rng_from(0)).unwrap());
        let tags = SftTags {
            iteration: 1,
            pipeline: PipelineKind::ActorCritic,
            env: EnvKind::TicTacToe,
        };
        let ex = SftExample::new(vec![ChatTurn::user("q")], "a", tags).unwrap();
        let mut trace = TraceLog::new();
        trace.push(0, Phase::Rollout, "collect", 1);
        trace.push(0, Phase::Emit, "sets", 2);
        IterationArtifacts {
            trajectories: vec![traj],
            value_set: TrainingSet::new(vec![ex.clone()]),
            policy_set: TrainingSet::new(vec![ex]),
            metrics: IterationMetrics::empty(1),
            trace,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = artifacts();
        let path = a.write(dir.path()).unwrap();
        for f in CHECKPOINT_FILES {
            assert!(path.join(f).is_file(), "{f}");
        }
        assert_eq!(IterationArtifacts::read(dir.path(), 1).unwrap().unwrap(), a);
        assert!(IterationArtifacts::read(dir.path(), 0).unwrap().is_none());
    }

    #[test]
    fn completion_marker() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(completed_iterations(dir.path()), 0);
        let mut a = artifacts();
        a.metrics.iteration = 0;
        a.write(dir.path()).unwrap();
        std::fs::create_dir_all(iteration_dir(dir.path(), 1)).unwrap();
        assert_eq!(completed_iterations(dir.path()), 1);
    }
}
