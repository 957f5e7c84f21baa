//! `loft` command line: corpus rendering, base pretraining, oracle,
//! adapter fitting, generation, downstream training, analysis, and the
//! experiment grid.
//!
//! Every subcommand reads a TOML [`RunConfig`] (all keys optional), applies
//! flag overrides, reads its inputs from the output root and writes its
//! artifacts plus a JSON [`RunManifest`] under `manifests/`.
//!
//! Exit status: 0 on success, 2 for usage errors, 3 when an input artifact
//! is missing, 1 for anything else.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod layout;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use experiment::{run_experiment, CellResult, ExperimentOutcome};
pub use layout::{Layout, RunManifest};

use commands::{AnalyzeArgs, DataArgs, ExportGridArgs, GenerateArgs, LoraFitArgs};

#[derive(Parser, Debug)]
#[command(name = "loft", version, about = "Per-image adapter fusion for synthetic training data")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root [env: LOFT_OUT] [default: loft-out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed of few-shot draws, adapter fits, generation and classifiers.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the pretraining corpus, the downstream pool, the oracle
    /// training set and the test split.
    MakeData(CorpusFlags),
    /// Train the class-conditional base denoiser.
    Pretrain(PretrainFlags),
    /// Train the oracle classifier on real downstream images.
    TrainOracle(OracleFlags),
    /// Fit adapters on the few-shot images.
    LoraFit {
        #[command(flatten)]
        args: LoraFitArgs,
        #[command(flatten)]
        shots: ShotFlags,
        #[command(flatten)]
        lora: LoraFlags,
    },
    /// Generate a labelled synthetic dataset.
    Generate {
        #[command(flatten)]
        args: GenerateArgs,
        #[command(flatten)]
        gen: GenFlags,
    },
    /// Train a downstream classifier and evaluate it on the real test split.
    TrainClassifier {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        gen: GenFlags,
        #[command(flatten)]
        clf: ClassifierFlags,
    },
    /// Per-class recognizability, diversity and alignment of a dataset.
    Analyze {
        #[command(flatten)]
        args: AnalyzeArgs,
        #[command(flatten)]
        gen: GenFlags,
    },
    /// Run an experiment grid.
    Experiment(ExperimentFlags),
    /// Tile images of a dataset into a PGM grid.
    ExportGrid {
        #[command(flatten)]
        args: ExportGridArgs,
        #[command(flatten)]
        gen: GenFlags,
    },
}

#[derive(Args, Debug, Default)]
pub struct CorpusFlags {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub pretrain_per_class: Option<usize>,
    #[arg(long)]
    pub pool_per_class: Option<usize>,
    #[arg(long)]
    pub oracle_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct PretrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct OracleFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct ShotFlags {
    /// Shots per class.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct LoraFlags {
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct GenFlags {
    /// `classcond`, `perclass`, `loft` or `loft-<sampler>`.
    #[arg(long)]
    pub method: Option<String>,
    /// Fusion weights for `loft`: `fixed:0.5`, `beta:10`, `vec:0.5,0.25,0.25`.
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    pub guidance: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct ClassifierFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GridKind {
    /// Methods × sizes × shots × seeds.
    Default,
    /// Fusion weight samplers at fixed shots.
    Ablation,
}

#[derive(Args, Debug)]
pub struct ExperimentFlags {
    #[arg(long, value_enum, default_value_t = GridKind::Default)]
    pub grid: GridKind,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Comma-separated seeds replacing the grid's.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

macro_rules! set {
    ($target:expr, $flag:expr) => {
        if let Some(v) = $flag.clone() {
            $target = v;
        }
    };
}

impl GenFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let g = &mut cfg.generation;
        if let Some(m) = &self.method {
            match m.strip_prefix("loft-") {
                Some(sampler) => {
                    g.method = "loft".into();
                    g.lambda = sampler.into();
                }
                None => g.method = m.clone(),
            }
        }
        set!(g.lambda, self.lambda);
        set!(g.per_class, self.per_class);
        set!(g.k, self.k);
        set!(g.guidance.scale, self.guidance);
    }
}

impl Cli {
    /// Config file (if any) with every flag applied.
    pub fn resolve_config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        set!(cfg.seed, self.seed);
        match &self.command {
            Command::MakeData(f) => {
                let c = &mut cfg.corpus;
                set!(c.classes, f.classes);
                set!(c.pretrain_per_class, f.pretrain_per_class);
                set!(c.pool_per_class, f.pool_per_class);
                set!(c.oracle_per_class, f.oracle_per_class);
                set!(c.test_per_class, f.test_per_class);
                set!(c.seed, f.data_seed);
            }
            Command::Pretrain(f) => {
                let d = &mut cfg.diffusion;
                set!(d.train.steps, f.steps);
                set!(d.train.lr, f.lr);
                set!(d.train.batch_size, f.batch_size);
                set!(d.arch.hidden, f.hidden);
            }
            Command::TrainOracle(f) => set!(cfg.downstream.oracle.epochs, f.epochs),
            Command::LoraFit { shots, lora, .. } => {
                set!(cfg.generation.k, shots.k);
                set!(cfg.lora.rank, lora.rank);
                set!(cfg.lora.steps, lora.steps);
                set!(cfg.lora.lr, lora.lr);
            }
            Command::Generate { gen, .. } | Command::Analyze { gen, .. } | Command::ExportGrid { gen, .. } => {
                gen.apply(&mut cfg)
            }
            Command::TrainClassifier { gen, clf, .. } => {
                gen.apply(&mut cfg);
                set!(cfg.downstream.classifier.epochs, clf.epochs);
            }
            Command::Experiment(f) => {
                set!(cfg.experiment.workers, f.workers);
                if let Some(seeds) = &f.seeds {
                    cfg.experiment.default_grid.seeds = seeds.clone();
                    cfg.experiment.ablation_grid.seeds = seeds.clone();
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn manifest_name(&self, cfg: &RunConfig) -> CliResult<String> {
        Ok(match &self.command {
            Command::MakeData(_) => "make-data".into(),
            Command::Pretrain(_) => "pretrain".into(),
            Command::TrainOracle(_) => "train-oracle".into(),
            Command::LoraFit { .. } => format!("lora-fit_seed{}_k{}", cfg.seed, cfg.generation.k),
            Command::Generate { .. } => format!("generate_{}", commands::configured_stem(cfg)?),
            Command::TrainClassifier { data, .. } => format!("train-classifier_{}", data_stem(data, cfg)?),
            Command::Analyze { args, .. } => format!("analyze_{}", data_stem(&args.data, cfg)?),
            Command::ExportGrid { args, .. } => format!("export-grid_{}", data_stem(&args.data, cfg)?),
            Command::Experiment(f) => format!("experiment_{}", grid_name(f.grid)),
        })
    }
}

fn data_stem(data: &DataArgs, cfg: &RunConfig) -> CliResult<String> {
    match &data.data {
        Some(p) => Ok(p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()),
        None => commands::configured_stem(cfg),
    }
}

fn grid_name(kind: GridKind) -> &'static str {
    match kind {
        GridKind::Default => "default",
        GridKind::Ablation => "ablation",
    }
}

/// Runs one parsed command and writes its manifest.
pub fn execute(cli: &Cli) -> CliResult<RunManifest> {
    let cfg = cli.resolve_config()?;
    let layout = Layout::new(config::resolve_out(cli.out.as_deref(), &cfg));
    let manifest = match &cli.command {
        Command::MakeData(_) => commands::make_data(&cfg, &layout)?,
        Command::Pretrain(_) => commands::pretrain(&cfg, &layout)?,
        Command::TrainOracle(_) => commands::train_oracle_cmd(&cfg, &layout)?,
        Command::LoraFit { args, .. } => commands::lora_fit(&cfg, &layout, args)?,
        Command::Generate { args, .. } => commands::generate(&cfg, &layout, args)?,
        Command::TrainClassifier { data, .. } => commands::train_classifier_cmd(&cfg, &layout, data)?,
        Command::Analyze { args, .. } => commands::analyze(&cfg, &layout, args)?,
        Command::ExportGrid { args, .. } => commands::export_grid_cmd(&cfg, &layout, args)?,
        Command::Experiment(f) => {
            let grid = match f.grid {
                GridKind::Default => &cfg.experiment.default_grid,
                GridKind::Ablation => &cfg.experiment.ablation_grid,
            };
            let outcome = run_experiment(&cfg, grid, grid_name(f.grid), &layout)?;
            let failed = outcome.results.iter().filter(|r| !r.is_ok()).count();
            eprintln!(
                "{} rows written to {} ({failed} failed)",
                outcome.results.len(),
                outcome.results_path.display()
            );
            outcome.manifest
        }
    };
    manifest.write(&layout.manifest(&cli.manifest_name(&cfg)?))?;
    Ok(manifest)
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
