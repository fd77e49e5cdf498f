#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Settings for a pipeline small enough to train and run in seconds.
pub fn tiny_sets(out: &Path) -> Vec<String> {
    [
        "profile=\"simulation\"".to_string(),
        format!("paths.output={:?}", out.display().to_string()),
        "schedule.steps=25".into(),
        "schedule.beta_start=0.001".into(),
        "schedule.beta_end=0.1".into(),
        "model.channels=4".into(),
        "model.depth_levels=1".into(),
        "model.max_groups=2".into(),
        "synth.size=16".into(),
        "synth.count=8".into(),
        "train.steps=6".into(),
        "train.batch_size=2".into(),
        "train.log_every=2".into(),
        "simulation.count=3".into(),
        "sample.count=2".into(),
        "guidance.n_phi_iters=3".into(),
    ]
    .into()
}

/// Runs the binary with `--set` for every entry of `sets`.
pub fn osmosis(command: &str, sets: &[String], extra: &[&str], cache: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_osmosis"));
    cmd.arg(command).env("OSMOSIS_CACHE", cache).env("RUST_LOG", "warn");
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.args(extra);
    cmd.output().expect("spawn osmosis")
}

pub fn check(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}
