#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A run configuration small enough for tests: two 6-frame episodes, 4 training steps.
pub const SMALL: &str = r#"
seed = 7
threads = 2

[trajectory]
frames = 6

[simulate]
episodes = 2

[train]
max_steps = 4
batch_size = 2
validation_interval = 2
validation_fraction = 0.2

[calibration]
beta_count = 6

[sweep]
repetitions = 1
warmup = 0
max_pairs = 3
"#;

pub fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskscan"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "off")
        .output()
        .expect("spawn maskscan")
}

pub fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "maskscan {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

/// Every file under `root` with its contents, sorted by relative path.
pub fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

/// Runs every subcommand once against `small.toml` in `cwd`; returns each stdout.
pub fn pipeline(cwd: &Path) -> Vec<String> {
    let steps: [&[&str]; 8] = [
        &["simulate", "--out", "ds"],
        &["train", "--dataset", "ds", "--out", "w.mskw"],
        &["train", "--dataset", "ds", "--out", "m.mskw", "--mask-supervised"],
        &["odometry", "--dataset", "ds", "--weights", "w.mskw", "--out", "est.csv"],
        &["odometry", "--dataset", "ds", "--no-weights", "--episode", "1", "--out", "raw.csv"],
        &["evaluate", "--dataset", "ds", "--estimate", "est.csv", "--out", "rep.json"],
        &["calibrate", "--dataset", "ds", "--weights", "w.mskw", "--out", "cal.csv", "--summary", "cal.json"],
        &["sweep", "--dataset", "ds", "--no-timing", "--out", "sweep.csv"],
    ];
    steps
        .iter()
        .map(|rest| {
            let args: Vec<&str> = ["--config", "small.toml"].iter().chain(rest.iter()).copied().collect();
            ok(&args, cwd)
        })
        .collect()
}

pub const PIPELINE_OUTPUTS: [&str; 9] = [
    "w.mskw",
    "w.history.csv",
    "m.mskw",
    "est.csv",
    "raw.csv",
    "rep.json",
    "cal.csv",
    "cal.json",
    "sweep.csv",
];
