#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_prodretrieve");

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

pub fn run_ok(args: &[&str]) -> serde_json::Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a small synthetic benchmark into `dir` through the binary.
pub fn synth(dir: &Path, classes: usize, sigma: f64, seed: u64) {
    run_ok(&[
        "gen-synth",
        "--n-classes",
        &classes.to_string(),
        "--gallery-per-class",
        "6",
        "--queries-per-class",
        "2",
        "--dim",
        "16",
        "--noise-sigma",
        &sigma.to_string(),
        "--seed",
        &seed.to_string(),
        "--out-dir",
        p(dir),
    ]);
}
