#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};

use scalemixer_core::config::RunConfig;

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the `scalemixer` binary with `args`.
pub fn scalemixer<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_scalemixer")).args(args).output().expect("spawn scalemixer");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Like [`scalemixer`] but panics unless the command succeeds.
pub fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    let out = scalemixer(args);
    let shown: Vec<String> = args.iter().map(|a| a.as_ref().to_string_lossy().into_owned()).collect();
    assert_eq!(out.code, 0, "{shown:?} failed:\n{}", out.stderr);
    out
}

pub fn write_config(dir: &Path, run: &RunConfig) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("config.toml");
    fs::write(&path, run.to_toml()).unwrap();
    path
}

/// Directories of a toy pipeline run through every training stage.
pub struct ToyRun {
    pub root: PathBuf,
    pub config: PathBuf,
    pub data: PathBuf,
    pub global: PathBuf,
    pub one_step: PathBuf,
    pub rollout: PathBuf,
}

impl ToyRun {
    pub fn args(&self, seed: u64) -> Vec<String> {
        vec!["--config".into(), self.config.display().to_string(), "--seed".into(), seed.to_string()]
    }

    fn with<'a>(&self, seed: u64, rest: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut a = self.args(seed);
        a.extend(rest.into_iter().map(String::from));
        a
    }

    /// Runs a subcommand with the toy config and `seed`, asserting success.
    pub fn ok(&self, seed: u64, rest: &[&str]) -> Output {
        ok(&self.with(seed, rest.iter().copied()))
    }

    pub fn run(&self, seed: u64, rest: &[&str]) -> Output {
        scalemixer(&self.with(seed, rest.iter().copied()))
    }
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// `gen-data`, `pretrain-global`, `one-step` and `rollout-ft` under `root`.
pub fn toy_pipeline(root: &Path, run: &RunConfig, seed: u64) -> ToyRun {
    let config = write_config(root, run);
    let t = ToyRun {
        root: root.to_path_buf(),
        config,
        data: root.join("data"),
        global: root.join("global"),
        one_step: root.join("one_step"),
        rollout: root.join("rollout"),
    };
    t.ok(seed, &["gen-data", "--out", p(&t.data)]);
    t.ok(seed, &["train", "--stage", "pretrain-global", "--data", p(&t.data), "--out", p(&t.global)]);
    t.ok(seed, &["train", "--stage", "one-step", "--data", p(&t.data), "--init", p(&t.global), "--out", p(&t.one_step)]);
    t.ok(seed, &["train", "--stage", "rollout-ft", "--data", p(&t.data), "--init", p(&t.one_step), "--out", p(&t.rollout)]);
    t
}

/// SHA-256 of every file below `dir`, keyed by relative path.
pub fn tree_digest(dir: &Path, skip: &[&str]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
            if skip.iter().any(|s| rel.ends_with(s)) {
                continue;
            }
            out.insert(rel, hex::encode(Sha256::digest(fs::read(&path).unwrap())));
        }
    }
    out
}

/// Rows of a CSV file as string records, header first.
pub fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}
