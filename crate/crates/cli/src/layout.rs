//! Where every artifact lives under the output root.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use loft_core::pipelines::GenMethod;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn pretrain_data(&self) -> PathBuf {
        self.root.join("data/pretrain.lfds")
    }

    pub fn pool_data(&self) -> PathBuf {
        self.root.join("data/pool.lfds")
    }

    pub fn oracle_data(&self) -> PathBuf {
        self.root.join("data/oracle_train.lfds")
    }

    pub fn test_data(&self) -> PathBuf {
        self.root.join("data/test.lfds")
    }

    pub fn base_model(&self) -> PathBuf {
        self.root.join("models/base.lftm")
    }

    pub fn base_loss(&self) -> PathBuf {
        self.root.join("models/base_loss.csv")
    }

    pub fn oracle_model(&self) -> PathBuf {
        self.root.join("models/oracle.lftm")
    }

    pub fn image_adapters(&self, seed: u64) -> PathBuf {
        self.root.join(format!("adapters/seed{seed}"))
    }

    pub fn class_adapters(&self, seed: u64, k: usize) -> PathBuf {
        self.image_adapters(seed).join(format!("k{k}"))
    }

    pub fn synthetic(&self, stem: &str) -> PathBuf {
        self.root.join(format!("synthetic/{stem}.lfds"))
    }

    pub fn synthetic_manifest(&self, stem: &str) -> PathBuf {
        self.root.join(format!("synthetic/{stem}.json"))
    }

    pub fn classifier(&self, stem: &str) -> PathBuf {
        self.root.join(format!("classifiers/{stem}.lftm"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn grid_image(&self, stem: &str) -> PathBuf {
        self.root.join(format!("grids/{stem}.pgm"))
    }

    pub fn results(&self, name: &str) -> PathBuf {
        self.root.join("results").join(name)
    }

    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.root.join(format!("manifests/{name}.json"))
    }

    /// `path` relative to the root when it lies below it.
    pub fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().into_owned()
    }
}

/// Fails with exit status 3 naming `path` when it does not exist.
pub fn require(path: &Path) -> CliResult<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

/// File-name-safe form of a method label.
pub fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Stem of a generated dataset; class-conditional sets do not depend on `k`.
pub fn synthetic_stem(method: &GenMethod, k: usize, per_class: usize, seed: u64) -> String {
    match method {
        GenMethod::ClassCond => format!("classcond_s{per_class}_seed{seed}"),
        m => format!("{}_k{k}_s{per_class}_seed{seed}", slug(&m.label())),
    }
}

pub fn file_hash(path: &Path) -> CliResult<String> {
    Ok(loft_core::content_hash(&std::fs::read(path)?))
}

/// Record of one command: config echo, seeds, hashes of what was read and
/// written, and stage timings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, seeds: Vec<u64>) -> Self {
        RunManifest {
            command: command.into(),
            config: config.clone(),
            seeds,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, layout: &Layout, path: &Path) -> CliResult<()> {
        self.inputs.insert(layout.rel(path), file_hash(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, layout: &Layout, path: &Path) -> CliResult<()> {
        self.artifacts.insert(layout.rel(path), file_hash(path)?);
        Ok(())
    }

    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings_ms.insert(stage.into(), start.elapsed().as_millis() as u64);
        out
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Writes `bytes` to `path` atomically, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    Ok(loft_core::container::write_atomic(path, bytes)?)
}
