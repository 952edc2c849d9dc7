#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cgpo_cli::RunConfig;
use cgpo_cli::config::BackendConfig;
use cgpo_core::backends::SimulatorProfile;

/// Writes `n` synthetic four-option questions as JSON Lines.
pub fn write_dataset(path: &Path, prefix: &str, n: usize) {
    let mut text = String::new();
    for i in 0..n {
        let line = serde_json::json!({
            "id": format!("{prefix}-{i:04}"),
            "question": format!("Which finding is shown in case {prefix} {i}?"),
            "options": ["effusion", "nodule", "fracture", "normal study"],
            "answer": i % 4,
        });
        text.push_str(&line.to_string());
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

/// A directory with train/val/test splits and a config pointing at them.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new(n_train: usize, n_val: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dir.path().join("train.jsonl"), "tr", n_train);
        write_dataset(&dir.path().join("val.jsonl"), "va", n_val);
        write_dataset(&dir.path().join("test.jsonl"), "te", n_val);
        Workspace { dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Config over the workspace splits with full-size subsampling.
    pub fn base_config(&self, n_train: usize, n_val: usize) -> RunConfig {
        let mut cfg = RunConfig { seed: 11, output_dir: PathBuf::from("run"), ..RunConfig::default() };
        cfg.data.train_path = Some(PathBuf::from("train.jsonl"));
        cfg.data.val_path = Some(PathBuf::from("val.jsonl"));
        cfg.data.test_path = Some(PathBuf::from("test.jsonl"));
        cfg.data.train_size = n_train;
        cfg.data.val_size = n_val;
        cfg
    }

    pub fn write_config(&self, name: &str, cfg: &RunConfig) -> PathBuf {
        let path = self.path(name);
        fs::write(&path, cfg.to_toml()).unwrap();
        path
    }
}

pub fn with_profile(mut cfg: RunConfig, profile: SimulatorProfile) -> RunConfig {
    cfg.backend = BackendConfig::Simulator { profile_path: None, profile };
    cfg
}

pub fn cgpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgpo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn assert_ok(out: &Output) {
    assert!(out.status.success(), "command failed: {}", stderr(out));
}
