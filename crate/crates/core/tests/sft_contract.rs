//! Every SFT file a pipeline writes must satisfy the fine-tuning schema.

use std::path::{Path, PathBuf};

use langrl_core::env_core::EnvKind;
use langrl_core::harness::{cli_run, run_experiment, RunConfig};
use langrl_core::pipelines::{validate_sft_file, PipelineKind};

fn sft_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap().flatten() {
        let p = entry.path();
        if p.is_dir() {
            out.extend(sft_files(&p));
        } else if p
            .file_name()
            .is_some_and(|n| n.to_string_lossy().ends_with("_sft.jsonl"))
        {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn check_run(mut c: RunConfig, pipeline: PipelineKind, env: EnvKind) {
    let dir = tempfile::tempdir().unwrap();
    c.run.output_dir = dir.path().join("run");
    run_experiment(&c).unwrap();
    let files = sft_files(&c.run.output_dir);
    assert!(!files.is_empty(), "{pipeline:?} wrote no SFT files");
    let mut records = 0;
    for f in &files {
        let r = validate_sft_file(f).unwrap();
        assert!(r.is_valid(), "{}: {:?}", f.display(), r.violations);
        records += r.records;
        let text = std::fs::read_to_string(f).unwrap();
        let tag = format!("\"env\":\"{}\"", serde_json::to_value(env).unwrap().as_str().unwrap());
        assert!(text.lines().all(|l| l.contains(&tag)), "{}", f.display());
    }
    assert!(records > 0, "{pipeline:?} wrote only empty SFT files");

    let mut argv = vec!["langrl".to_string(), "validate-sft".into()];
    argv.extend(files.iter().map(|f| f.display().to_string()));
    assert_eq!(cli_run(argv), 0);
}

#[test]
fn actor_critic_sft_is_valid() {
    let mut c = RunConfig::profile("tictactoe_ac").unwrap();
    c.run.iterations = 2;
    c.run.parallel = 4;
    c.actor_critic.trajectories = 16;
    c.evaluate.games = 10;
    check_run(c, PipelineKind::ActorCritic, EnvKind::TicTacToe);

    let mut lake = RunConfig::profile("frozenlake_ac").unwrap();
    lake.run.iterations = 1;
    lake.actor_critic.trajectories = 8;
    lake.evaluate.games = 10;
    check_run(lake, PipelineKind::ActorCritic, EnvKind::FrozenLake);
}

#[test]
fn td_sft_is_valid() {
    let mut c = RunConfig::default();
    c.run.pipeline = PipelineKind::TdTrain;
    c.run.iterations = 2;
    c.env.kind = EnvKind::Breakthrough;
    c.td.sim_grid = vec![2];
    c.td.rollout_grid = vec![1];
    c.td.max_states = 12;
    check_run(c, PipelineKind::TdTrain, EnvKind::Breakthrough);
}

#[test]
fn cli_rejects_corrupt_file() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"messages\":[],\"target\":\"x\"}\n").unwrap();
    assert_eq!(
        cli_run(["langrl".into(), "validate-sft".into(), bad.display().to_string()]),
        1
    );
    let missing = dir.path().join("missing.jsonl").display().to_string();
    assert_eq!(cli_run(["langrl".into(), "validate-sft".into(), missing]), 1);
}
