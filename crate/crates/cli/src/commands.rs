//! One function per subcommand. Each reads its inputs from the output
//! layout, writes its artifacts, and returns the run manifest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use loft_core::analysis::{class_metrics, export_scatter, flip_ratio};
use loft_core::datagen::{export_grid, make_dataset, make_fewshot, make_test_split, ImageDataset, RegimeConfig};
use loft_core::diffusion::{train_base, DenoiserWeights, LossTrace};
use loft_core::downstream::{eval_csv_header, eval_csv_row, evaluate, train_classifier, train_oracle, TrainedClassifier};
use loft_core::lora::{load_adapter, save_adapter, LoraAdapter, CLASS_SOURCE_ID};
use loft_core::pipelines::{
    adapter_file_name, adapter_file_name_for, fit_class_adapters, fit_image_adapters, generate_dataset, GenMethod,
};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::layout::{require, synthetic_stem, write_file, Layout, RunManifest};

/// The four real datasets every run starts from.
pub struct Corpus {
    pub pretrain: ImageDataset,
    pub pool: ImageDataset,
    pub oracle_train: ImageDataset,
    pub test: ImageDataset,
}

/// Renders the corpus. The few-shot pool is a prefix of the oracle's
/// training set, so image ids never collide between the two.
pub fn build_corpus(cfg: &RunConfig) -> CliResult<Corpus> {
    let c = &cfg.corpus;
    let down = RegimeConfig::downstream(c.classes)?;
    let oracle_train = make_dataset(&down, c.oracle_per_class, c.seed)?;
    Ok(Corpus {
        pretrain: make_dataset(&RegimeConfig::pretrain(c.classes)?, c.pretrain_per_class, c.seed)?,
        pool: oracle_train.take_per_class(c.pool_per_class),
        test: make_test_split(&down, c.test_per_class)?,
        oracle_train,
    })
}

pub fn pretrain_base(cfg: &RunConfig, data: &ImageDataset) -> CliResult<(DenoiserWeights<f32>, LossTrace)> {
    Ok(train_base(data, &cfg.arch(), &cfg.diffusion.train)?)
}

pub fn fit_oracle(cfg: &RunConfig, train: &ImageDataset, test: &ImageDataset) -> CliResult<TrainedClassifier> {
    let (oracle, _) = train_oracle(
        train,
        test,
        cfg.corpus.classes,
        &cfg.downstream.oracle,
        cfg.downstream.oracle_seed,
    )?;
    Ok(oracle)
}

fn load_dataset(path: &Path) -> CliResult<ImageDataset> {
    Ok(ImageDataset::load(require(path)?)?)
}

fn load_base(path: &Path) -> CliResult<DenoiserWeights<f32>> {
    Ok(DenoiserWeights::load(require(path)?)?)
}

fn load_classifier(path: &Path) -> CliResult<TrainedClassifier> {
    Ok(TrainedClassifier::load(require(path)?)?)
}

pub fn make_data(cfg: &RunConfig, layout: &Layout) -> CliResult<RunManifest> {
    let mut m = RunManifest::new("make-data", cfg, vec![cfg.corpus.seed]);
    let corpus = m.timed("render", || build_corpus(cfg))?;
    for (ds, path) in [
        (&corpus.pretrain, layout.pretrain_data()),
        (&corpus.pool, layout.pool_data()),
        (&corpus.oracle_train, layout.oracle_data()),
        (&corpus.test, layout.test_data()),
    ] {
        ds.save(&path)?;
        m.artifact(layout, &path)?;
    }
    Ok(m)
}

pub fn pretrain(cfg: &RunConfig, layout: &Layout) -> CliResult<RunManifest> {
    let mut m = RunManifest::new("pretrain", cfg, vec![cfg.diffusion.train.seed]);
    let data_path = layout.pretrain_data();
    let data = load_dataset(&data_path)?;
    m.input(layout, &data_path)?;
    let (base, trace) = m.timed("train", || pretrain_base(cfg, &data))?;
    base.save(&layout.base_model())?;
    write_file(&layout.base_loss(), trace.to_csv().as_bytes())?;
    m.artifact(layout, &layout.base_model())?;
    m.artifact(layout, &layout.base_loss())?;
    Ok(m)
}

pub fn train_oracle_cmd(cfg: &RunConfig, layout: &Layout) -> CliResult<RunManifest> {
    let mut m = RunManifest::new("train-oracle", cfg, vec![cfg.downstream.oracle_seed]);
    let (train_path, test_path) = (layout.oracle_data(), layout.test_data());
    let train = load_dataset(&train_path)?;
    let test = load_dataset(&test_path)?;
    m.input(layout, &train_path)?;
    m.input(layout, &test_path)?;
    let oracle = m.timed("train", || fit_oracle(cfg, &train, &test))?;
    let report = evaluate(&oracle, &test)?;
    let eval_path = layout.report("oracle_eval.csv");
    let csv = format!(
        "{}\n{}\n",
        eval_csv_header(cfg.corpus.classes),
        eval_csv_row("oracle", cfg.downstream.oracle_seed, &report)
    );
    oracle.save(&layout.oracle_model())?;
    write_file(&eval_path, csv.as_bytes())?;
    m.artifact(layout, &layout.oracle_model())?;
    m.artifact(layout, &eval_path)?;
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FitMode {
    /// One adapter per shot.
    Image,
    /// One adapter per class on all of its shots.
    Class,
    Both,
}

#[derive(Args, Clone, Debug)]
pub struct LoraFitArgs {
    #[arg(long, value_enum, default_value_t = FitMode::Image)]
    pub mode: FitMode,
}

pub fn lora_fit(cfg: &RunConfig, layout: &Layout, args: &LoraFitArgs) -> CliResult<RunManifest> {
    let (seed, k) = (cfg.seed, cfg.generation.k);
    let mut m = RunManifest::new("lora-fit", cfg, vec![seed]);
    let base = load_base(&layout.base_model())?;
    let pool = load_dataset(&layout.pool_data())?;
    m.input(layout, &layout.base_model())?;
    m.input(layout, &layout.pool_data())?;
    let shots = make_fewshot(&pool, k, seed)?;
    let save_all = |m: &mut RunManifest, adapters: &[LoraAdapter<f32>], dir: &Path| -> CliResult<()> {
        for a in adapters {
            let path = dir.join(adapter_file_name(a));
            save_adapter(a, &path)?;
            m.artifact(layout, &path)?;
        }
        Ok(())
    };
    if matches!(args.mode, FitMode::Image | FitMode::Both) {
        let adapters = m.timed("fit_images", || fit_image_adapters(&base, &shots, &cfg.lora, seed))?;
        save_all(&mut m, &adapters, &layout.image_adapters(seed))?;
    }
    if matches!(args.mode, FitMode::Class | FitMode::Both) {
        let adapters = m.timed("fit_classes", || fit_class_adapters(&base, &shots, &cfg.lora, seed))?;
        save_all(&mut m, &adapters, &layout.class_adapters(seed, k))?;
    }
    Ok(m)
}

/// Loads the per-image adapters of `shots` from `dir`; every class with an
/// absent file is reported.
pub fn load_image_adapters(dir: &Path, shots: &ImageDataset) -> CliResult<Vec<LoraAdapter<f32>>> {
    let mut missing = BTreeSet::new();
    let mut out = Vec::with_capacity(shots.len());
    for img in shots.items() {
        let path = dir.join(adapter_file_name_for(img.label, img.id));
        if path.exists() {
            out.push(load_adapter(&path)?);
        } else {
            missing.insert(img.label);
        }
    }
    missing_check(dir, missing)?;
    Ok(out)
}

pub fn load_class_adapters(dir: &Path, classes: usize) -> CliResult<Vec<LoraAdapter<f32>>> {
    let mut missing = BTreeSet::new();
    let mut out = Vec::with_capacity(classes);
    for c in 0..classes {
        let path = dir.join(adapter_file_name_for(c, CLASS_SOURCE_ID));
        if path.exists() {
            out.push(load_adapter(&path)?);
        } else {
            missing.insert(c);
        }
    }
    missing_check(dir, missing)?;
    Ok(out)
}

fn missing_check(dir: &Path, missing: BTreeSet<usize>) -> CliResult<()> {
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::MissingAdapters {
            dir: dir.to_path_buf(),
            classes: missing.into_iter().collect(),
        })
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct GenerateArgs {
    /// Adapter directory; defaults to the one `lora-fit` writes for this seed.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
}

/// Stem of the dataset the generation settings in `cfg` produce.
pub fn configured_stem(cfg: &RunConfig) -> CliResult<String> {
    let g = &cfg.generation;
    Ok(synthetic_stem(&g.gen_method()?, g.k, g.per_class, cfg.seed))
}

pub fn generate(cfg: &RunConfig, layout: &Layout, args: &GenerateArgs) -> CliResult<RunManifest> {
    let g = &cfg.generation;
    let (seed, method) = (cfg.seed, g.gen_method()?);
    let mut m = RunManifest::new("generate", cfg, vec![seed]);
    let base = load_base(&layout.base_model())?;
    m.input(layout, &layout.base_model())?;
    let adapters = match &method {
        GenMethod::ClassCond => vec![],
        GenMethod::PerClassLora => {
            let dir = args.adapters.clone().unwrap_or_else(|| layout.class_adapters(seed, g.k));
            load_class_adapters(&dir, cfg.corpus.classes)?
        }
        GenMethod::Loft(_) => {
            let dir = args.adapters.clone().unwrap_or_else(|| layout.image_adapters(seed));
            let pool = load_dataset(&layout.pool_data())?;
            m.input(layout, &layout.pool_data())?;
            load_image_adapters(&dir, &make_fewshot(&pool, g.k, seed)?)?
        }
    };
    let synth = m.timed("generate", || {
        generate_dataset(&method, g.per_class, &base, &adapters, &g.guidance, seed)
    })?;
    let stem = configured_stem(cfg)?;
    let (ds_path, manifest_path) = (layout.synthetic(&stem), layout.synthetic_manifest(&stem));
    synth.save(&ds_path, &manifest_path)?;
    m.artifact(layout, &ds_path)?;
    m.artifact(layout, &manifest_path)?;
    Ok(m)
}

#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    /// Dataset file; defaults to the one `generate` writes for these settings.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl DataArgs {
    /// Path and stem of the selected dataset.
    fn resolve(&self, cfg: &RunConfig, layout: &Layout) -> CliResult<(PathBuf, String)> {
        match &self.data {
            Some(p) => {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((p.clone(), stem))
            }
            None => {
                let stem = configured_stem(cfg)?;
                Ok((layout.synthetic(&stem), stem))
            }
        }
    }
}

pub fn train_classifier_cmd(cfg: &RunConfig, layout: &Layout, args: &DataArgs) -> CliResult<RunManifest> {
    let mut m = RunManifest::new("train-classifier", cfg, vec![cfg.seed]);
    let (data_path, stem) = args.resolve(cfg, layout)?;
    let data = load_dataset(&data_path)?;
    let test = load_dataset(&layout.test_data())?;
    m.input(layout, &data_path)?;
    m.input(layout, &layout.test_data())?;
    let clf = m.timed("train", || {
        train_classifier(&data, cfg.corpus.classes, &cfg.downstream.classifier, cfg.seed)
    })?;
    let report = evaluate(&clf, &test)?;
    let csv = format!(
        "{}\n{}\n",
        eval_csv_header(cfg.corpus.classes),
        eval_csv_row(&stem, cfg.seed, &report)
    );
    let (clf_path, eval_path) = (layout.classifier(&stem), layout.report(&format!("{stem}_eval.csv")));
    clf.save(&clf_path)?;
    write_file(&eval_path, csv.as_bytes())?;
    m.artifact(layout, &clf_path)?;
    m.artifact(layout, &eval_path)?;
    Ok(m)
}

#[derive(Args, Clone, Debug, Default)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Classifier trained on the dataset; adds per-class accuracy.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Second classifier; writes the flip ratio against `--classifier`.
    #[arg(long, requires = "classifier")]
    pub versus: Option<PathBuf>,
}

pub fn analyze(cfg: &RunConfig, layout: &Layout, args: &AnalyzeArgs) -> CliResult<RunManifest> {
    let mut m = RunManifest::new("analyze", cfg, vec![cfg.seed]);
    let (data_path, stem) = args.data.resolve(cfg, layout)?;
    let data = load_dataset(&data_path)?;
    let test = load_dataset(&layout.test_data())?;
    let oracle = load_classifier(&layout.oracle_model())?;
    for p in [&data_path, &layout.test_data(), &layout.oracle_model()] {
        m.input(layout, p)?;
    }
    let report = match &args.classifier {
        Some(p) => {
            m.input(layout, p)?;
            Some(evaluate(&load_classifier(p)?, &test)?)
        }
        None => None,
    };
    let records = m.timed("metrics", || class_metrics(&stem, &oracle, &data, &test, report.as_ref()))?;
    let metrics_path = layout.report(&format!("{stem}_metrics.csv"));
    write_file(&metrics_path, export_scatter(&records).as_bytes())?;
    m.artifact(layout, &metrics_path)?;
    if let (Some(a), Some(b_path)) = (&report, &args.versus) {
        m.input(layout, b_path)?;
        let b = evaluate(&load_classifier(b_path)?, &test)?;
        let flips_path = layout.report(&format!("{stem}_flips.csv"));
        let csv = format!(
            "a,b,flip_ratio\n{},{},{:.6}\n",
            layout.rel(args.classifier.as_deref().expect("checked above")),
            layout.rel(b_path),
            flip_ratio(a, &b)?
        );
        write_file(&flips_path, csv.as_bytes())?;
        m.artifact(layout, &flips_path)?;
    }
    Ok(m)
}

#[derive(Args, Clone, Debug)]
pub struct ExportGridArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Images shown per class; one row per class.
    #[arg(long, default_value_t = 8)]
    pub columns: usize,
    /// Output PGM file; defaults to `grids/<dataset>.pgm`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn export_grid_cmd(cfg: &RunConfig, layout: &Layout, args: &ExportGridArgs) -> CliResult<RunManifest> {
    let mut m = RunManifest::new("export-grid", cfg, vec![]);
    let (data_path, stem) = args.data.resolve(cfg, layout)?;
    let data = load_dataset(&data_path)?;
    m.input(layout, &data_path)?;
    let shown = data.take_per_class(args.columns);
    let images: Vec<&[f32]> = shown.items().iter().map(|i| i.pixels.as_slice()).collect();
    let pgm = export_grid(&images, data.height(), data.width(), args.columns)?;
    let out = args.output.clone().unwrap_or_else(|| layout.grid_image(&stem));
    write_file(&out, &pgm)?;
    m.artifact(layout, &out)?;
    Ok(m)
}
