//! Run configuration: a TOML file whose every key is optional, then
//! command-line overrides on top.

use std::path::{Path, PathBuf};

use loft_core::diffusion::{BaseTrainConfig, DenoiserArch, GuidanceConfig};
use loft_core::downstream::ClassifierConfig;
use loft_core::lora::{LambdaSampler, LoraConfig};
use loft_core::pipelines::GenMethod;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable naming the output root when `--out` is absent.
pub const OUT_ENV: &str = "LOFT_OUT";
pub const DEFAULT_OUT: &str = "loft-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of few-shot draws, adapter fits, generation and downstream
    /// classifiers for single-stage commands.
    pub seed: u64,
    /// Output root; `--out` and `LOFT_OUT` take precedence.
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub diffusion: DiffusionConfig,
    pub lora: LoraConfig,
    pub generation: GenerationConfig,
    pub downstream: DownstreamConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: None,
            corpus: CorpusConfig::default(),
            diffusion: DiffusionConfig::default(),
            lora: LoraConfig::default(),
            generation: GenerationConfig::default(),
            downstream: DownstreamConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub classes: usize,
    pub pretrain_per_class: usize,
    /// Real downstream images per class the few-shot sets are drawn from.
    pub pool_per_class: usize,
    /// Real downstream images per class for the oracle; the pool is a prefix.
    pub oracle_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            classes: 6,
            pretrain_per_class: 2000,
            pool_per_class: 100,
            oracle_per_class: 500,
            test_per_class: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub arch: DenoiserArch,
    pub train: BaseTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// `classcond`, `perclass` or `loft`.
    pub method: String,
    /// Fusion weight sampler for `loft`: `fixed:0.5`, `beta:10`, `vec:...`.
    pub lambda: String,
    pub per_class: usize,
    /// Shots per class.
    pub k: usize,
    pub guidance: GuidanceConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            method: "loft".into(),
            lambda: "fixed:0.5".into(),
            per_class: 50,
            k: 16,
            guidance: GuidanceConfig::default(),
        }
    }
}

impl GenerationConfig {
    pub fn gen_method(&self) -> CliResult<GenMethod> {
        match self.method.as_str() {
            "loft" => Ok(GenMethod::Loft(self.lambda.parse::<LambdaSampler>()?)),
            other => Ok(other.parse()?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub oracle_seed: u64,
    pub classifier: ClassifierConfig,
    pub oracle: ClassifierConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            oracle_seed: 0,
            classifier: ClassifierConfig::default(),
            oracle: ClassifierConfig::default(),
        }
    }
}

/// One experiment grid: every method × size × shots × seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub methods: Vec<String>,
    pub sizes: Vec<usize>,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            methods: ["classcond", "perclass", "loft-fixed:0.5", "loft-fixed:1"]
                .map(String::from)
                .to_vec(),
            sizes: vec![50, 100, 200],
            ks: vec![2, 4, 8],
            seeds: vec![0, 1, 2],
        }
    }
}

impl GridConfig {
    pub fn ablation() -> Self {
        let methods = [
            "loft-fixed:0",
            "loft-fixed:0.3",
            "loft-fixed:0.5",
            "loft-fixed:0.7",
            "loft-fixed:1",
            "loft-beta:2",
            "loft-beta:5",
            "loft-beta:10",
            "loft-vec:0.5,0.25,0.25",
            "loft-vec:0.33,0.33,0.33",
            "loft-vec:0.7,0.15,0.15",
        ];
        GridConfig {
            methods: methods.map(String::from).to_vec(),
            sizes: vec![50, 200],
            ks: vec![8],
            seeds: vec![0, 1, 2],
        }
    }

    pub fn parsed_methods(&self) -> CliResult<Vec<GenMethod>> {
        self.methods.iter().map(|m| Ok(m.parse()?)).collect()
    }

    pub fn cells(&self) -> usize {
        self.methods.len() * self.sizes.len() * self.ks.len() * self.seeds.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub default_grid: GridConfig,
    pub ablation_grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            workers: 0,
            default_grid: GridConfig::default(),
            ablation_grid: GridConfig::ablation(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|msg| CliError::Config {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Denoiser architecture; `num_classes` always comes from the corpus.
    pub fn arch(&self) -> DenoiserArch {
        DenoiserArch {
            num_classes: self.corpus.classes,
            ..self.diffusion.arch.clone()
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Invalid(m));
        if self.corpus.classes == 0 {
            return bad("corpus.classes must be positive".into());
        }
        if self.corpus.pool_per_class > self.corpus.oracle_per_class {
            return bad("corpus.pool_per_class cannot exceed corpus.oracle_per_class".into());
        }
        self.lora.validate()?;
        self.generation.guidance.validate()?;
        self.generation.gen_method()?;
        for grid in [&self.experiment.default_grid, &self.experiment.ablation_grid] {
            grid.parsed_methods()?;
        }
        Ok(())
    }
}

/// Output root: explicit flag, then `LOFT_OUT`, then the config, then `loft-out`.
pub fn resolve_out(flag: Option<&Path>, config: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    config.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}
