#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use loft_cli::RunConfig;

pub const TINY_TOML: &str = include_str!("tiny.toml");

pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml(TINY_TOML).unwrap()
}

/// Writes the tiny config into `dir` and returns its path.
pub fn write_tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY_TOML).unwrap();
    p
}

/// Runs the `loft` binary with the tiny config and `--out <out>`.
pub fn loft(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loft"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("LOFT_OUT")
        .output()
        .unwrap()
}

pub fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file below `root`, relative, sorted.
pub fn files(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, acc: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, acc);
            } else {
                acc.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut acc = vec![];
    walk(root, root, &mut acc);
    acc.sort();
    acc
}
