//! The experiment grid: shared stages cached on disk by config hash, cells
//! run in a worker pool, results written in grid order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use loft_core::analysis::{class_metrics, export_scatter, MetricsRecord};
use loft_core::datagen::{make_fewshot, ImageDataset};
use loft_core::diffusion::DenoiserWeights;
use loft_core::downstream::{evaluate, train_classifier, TrainedClassifier};
use loft_core::lora::{load_adapter, save_adapter, LoraAdapter};
use loft_core::pipelines::{
    adapter_file_name, adapter_file_name_for, fit_class_adapters, fit_image_adapters, generate_dataset, GenMethod,
    GenerationManifest, SyntheticDataset,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{build_corpus, fit_oracle, pretrain_base, Corpus};
use crate::config::{GridConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::layout::{file_hash, write_file, Layout, RunManifest};

/// One grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub method: GenMethod,
    pub s: usize,
    pub k: usize,
    pub seed: u64,
}

/// Cells in result order: method, then size, then shots, then seed.
pub fn grid_cells(grid: &GridConfig) -> CliResult<Vec<Cell>> {
    let mut cells = Vec::with_capacity(grid.cells());
    for method in grid.parsed_methods()? {
        for &s in &grid.sizes {
            for &k in &grid.ks {
                for &seed in &grid.seeds {
                    cells.push(Cell {
                        method: method.clone(),
                        s,
                        k,
                        seed,
                    });
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub k: usize,
    pub s: usize,
    pub seed: u64,
    /// `None` when the cell completed; otherwise the failure.
    pub error: Option<String>,
    pub accuracy: Option<f64>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub records: Vec<MetricsRecord>,
}

impl CellResult {
    fn failed(cell: &Cell, err: String) -> Self {
        CellResult {
            method: cell.method.label(),
            k: cell.k,
            s: cell.s,
            seed: cell.seed,
            error: Some(err),
            accuracy: None,
            per_class_accuracy: vec![],
            records: vec![],
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    fn mean(&self, f: impl Fn(&MetricsRecord) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.records.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean over classes of the oracle F1 on the synthetic images.
    pub fn recognizability(&self) -> Option<f64> {
        self.mean(|r| r.recognizability)
    }

    pub fn diversity(&self) -> Option<f64> {
        self.mean(|r| Some(r.diversity))
    }

    pub fn fid(&self) -> Option<f64> {
        self.mean(|r| Some(r.fid))
    }
}

pub fn results_header(classes: usize) -> String {
    let mut h = String::from("method,k,s,seed,accuracy");
    for c in 0..classes {
        h.push_str(&format!(",class_{c}"));
    }
    h.push_str(",recognizability,diversity,fid,status");
    h
}

pub fn results_row(r: &CellResult, classes: usize) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut row = format!("{},{},{},{},{}", csv_field(&r.method), r.k, r.s, r.seed, opt(r.accuracy));
    for c in 0..classes {
        row.push(',');
        row.push_str(&opt(r.per_class_accuracy.get(c).copied().flatten()));
    }
    let status = match &r.error {
        None => "ok".to_string(),
        Some(e) => format!("error: {}", e.replace(['\n', '\r'], " ")),
    };
    row.push_str(&format!(
        ",{},{},{},{}",
        opt(r.recognizability()),
        opt(r.diversity()),
        opt(r.fid()),
        csv_field(&status)
    ));
    row
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub struct ExperimentOutcome {
    pub results: Vec<CellResult>,
    pub results_path: PathBuf,
    pub scatter_path: PathBuf,
    pub manifest: RunManifest,
    /// Cells answered from the cache.
    pub reused: usize,
}

fn key_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config values serialize");
    loft_core::content_hash(json.as_bytes())[..16].to_string()
}

/// Config hashes of every shared stage. Each key covers exactly the
/// settings the stage's output depends on.
struct Keys {
    base: String,
    oracle: String,
    lora: String,
}

impl Keys {
    fn new(cfg: &RunConfig) -> Self {
        let base = key_of(&("base", &cfg.corpus, cfg.arch(), &cfg.diffusion.train));
        let oracle = key_of(&("oracle", &cfg.corpus, &cfg.downstream.oracle, cfg.downstream.oracle_seed));
        let lora = key_of(&("lora", &base, &cfg.corpus, &cfg.lora));
        Keys { base, oracle, lora }
    }

    fn generation(&self, cfg: &RunConfig, method: &GenMethod, k: usize, seed: u64, per_class: usize) -> String {
        let adapters = match method {
            GenMethod::ClassCond => None,
            _ => Some((&self.lora, k)),
        };
        key_of(&(
            "gen",
            &self.base,
            adapters,
            method.label(),
            seed,
            per_class,
            &cfg.generation.guidance,
        ))
    }

    fn cell(&self, cfg: &RunConfig, gen: &str, cell: &Cell) -> String {
        key_of(&(
            "cell",
            gen,
            &self.oracle,
            cell.s,
            cell.seed,
            &cfg.downstream.classifier,
            &cfg.corpus,
        ))
    }
}

/// Cached base checkpoint an experiment under `cfg` uses.
pub fn base_cache_path(cfg: &RunConfig, layout: &Layout) -> PathBuf {
    layout.cache().join(format!("base-{}.lftm", Keys::new(cfg).base))
}

pub fn base_loss_cache_path(cfg: &RunConfig, layout: &Layout) -> PathBuf {
    layout.cache().join(format!("base-{}_loss.csv", Keys::new(cfg).base))
}

pub fn oracle_cache_path(cfg: &RunConfig, layout: &Layout) -> PathBuf {
    layout.cache().join(format!("oracle-{}.lftm", Keys::new(cfg).oracle))
}

type Shared<T> = Result<T, String>;

fn share<T>(r: CliResult<T>) -> Shared<T> {
    r.map_err(|e| e.to_string())
}

fn cached_base(cfg: &RunConfig, corpus: &Corpus, layout: &Layout) -> CliResult<DenoiserWeights<f32>> {
    let path = base_cache_path(cfg, layout);
    if path.exists() {
        return Ok(DenoiserWeights::load(&path)?);
    }
    let (base, trace) = pretrain_base(cfg, &corpus.pretrain)?;
    write_file(&base_loss_cache_path(cfg, layout), trace.to_csv().as_bytes())?;
    base.save(&path)?;
    Ok(base)
}

fn cached_oracle(cfg: &RunConfig, corpus: &Corpus, layout: &Layout) -> CliResult<TrainedClassifier> {
    let path = oracle_cache_path(cfg, layout);
    if path.exists() {
        return Ok(TrainedClassifier::load(&path)?);
    }
    let oracle = fit_oracle(cfg, &corpus.oracle_train, &corpus.test)?;
    oracle.save(&path)?;
    Ok(oracle)
}

/// Per-image adapters of `shots`: cached files are loaded, the rest fitted
/// and stored.
fn cached_image_adapters(
    cfg: &RunConfig,
    base: &DenoiserWeights<f32>,
    shots: &ImageDataset,
    seed: u64,
    dir: &Path,
) -> CliResult<Vec<LoraAdapter<f32>>> {
    let path_of = |label: usize, id: u64| dir.join(adapter_file_name_for(label, id));
    let todo: Vec<_> = shots
        .items()
        .iter()
        .filter(|i| !path_of(i.label, i.id).exists())
        .cloned()
        .collect();
    if !todo.is_empty() {
        let todo = ImageDataset::new(shots.height(), shots.width(), todo)?;
        for a in fit_image_adapters(base, &todo, &cfg.lora, seed)? {
            save_adapter(&a, &dir.join(adapter_file_name(&a)))?;
        }
    }
    shots
        .items()
        .iter()
        .map(|i| Ok(load_adapter(&path_of(i.label, i.id))?))
        .collect()
}

fn cached_class_adapters(
    cfg: &RunConfig,
    base: &DenoiserWeights<f32>,
    shots: &ImageDataset,
    seed: u64,
    dir: &Path,
) -> CliResult<Vec<LoraAdapter<f32>>> {
    let classes = cfg.corpus.classes;
    let paths: Vec<PathBuf> = (0..classes)
        .map(|c| dir.join(adapter_file_name_for(c, loft_core::lora::CLASS_SOURCE_ID)))
        .collect();
    if paths.iter().any(|p| !p.exists()) {
        for a in fit_class_adapters(base, shots, &cfg.lora, seed)? {
            save_adapter(&a, &dir.join(adapter_file_name(&a)))?;
        }
    }
    paths.iter().map(|p| Ok(load_adapter(p)?)).collect()
}

fn cached_generation(
    dir: &Path,
    key: &str,
    make: impl FnOnce() -> CliResult<SyntheticDataset>,
) -> CliResult<SyntheticDataset> {
    let (ds_path, manifest_path) = (dir.join(format!("{key}.lfds")), dir.join(format!("{key}.json")));
    if ds_path.exists() && manifest_path.exists() {
        let manifest: GenerationManifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
        return Ok(SyntheticDataset {
            dataset: ImageDataset::load(&ds_path)?,
            manifest,
        });
    }
    let synth = make()?;
    synth.save(&ds_path, &manifest_path)?;
    Ok(synth)
}

fn run_cell(
    cfg: &RunConfig,
    cell: &Cell,
    synth: &SyntheticDataset,
    oracle: &TrainedClassifier,
    test: &ImageDataset,
) -> CliResult<CellResult> {
    let train = synth.prefix(cell.s).dataset;
    let clf = train_classifier(&train, cfg.corpus.classes, &cfg.downstream.classifier, cell.seed)?;
    let report = evaluate(&clf, test)?;
    let records = class_metrics(&cell.method.label(), oracle, &train, test, Some(&report))?;
    Ok(CellResult {
        method: cell.method.label(),
        k: cell.k,
        s: cell.s,
        seed: cell.seed,
        error: None,
        accuracy: Some(report.accuracy),
        per_class_accuracy: report.per_class,
        records,
    })
}

/// Label of one cell in the per-class scatter export.
fn scatter_label(r: &CellResult) -> String {
    format!("{}|k{}|s{}|seed{}", r.method, r.k, r.s, r.seed)
}

/// Runs `grid` under `name` (used for result file names). Shared stages
/// and finished cells are reused from the cache when their config hash
/// matches; a failing stage fails only the cells that depend on it.
pub fn run_experiment(cfg: &RunConfig, grid: &GridConfig, name: &str, layout: &Layout) -> CliResult<ExperimentOutcome> {
    cfg.validate()?;
    let cells = grid_cells(grid)?;
    if cells.is_empty() {
        return Err(CliError::Invalid(format!("grid {name} has no cells")));
    }
    let workers = match cfg.experiment.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Invalid(format!("worker pool: {e}")))?;
    pool.install(|| run_grid(cfg, grid, name, layout, &cells))
}

fn run_grid(
    cfg: &RunConfig,
    grid: &GridConfig,
    name: &str,
    layout: &Layout,
    cells: &[Cell],
) -> CliResult<ExperimentOutcome> {
    let mut m = RunManifest::new(&format!("experiment:{name}"), cfg, grid.seeds.clone());
    let cache = layout.cache();
    let keys = Keys::new(cfg);
    let max_s = *grid.sizes.iter().max().expect("non-empty grid");

    let gen_keys: Vec<String> = cells
        .iter()
        .map(|c| keys.generation(cfg, &c.method, c.k, c.seed, max_s))
        .collect();
    let cell_paths: Vec<PathBuf> = cells
        .iter()
        .zip(&gen_keys)
        .map(|(c, g)| cache.join(format!("cells/{}.json", keys.cell(cfg, g, c))))
        .collect();
    // Cells differing only in a setting their method ignores (k for the
    // class-conditional baseline) share one entry.
    let mut results: Vec<Option<CellResult>> = cell_paths
        .iter()
        .zip(cells)
        .map(|(p, cell)| {
            std::fs::read(p)
                .ok()
                .and_then(|b| serde_json::from_slice::<CellResult>(&b).ok())
                .filter(CellResult::is_ok)
                .map(|r| CellResult { k: cell.k, ..r })
        })
        .collect();
    let reused = results.iter().filter(|r| r.is_some()).count();
    let pending: Vec<usize> = (0..cells.len()).filter(|&i| results[i].is_none()).collect();
    eprintln!("experiment {name}: {} cells, {reused} cached", cells.len());

    if !pending.is_empty() {
        let corpus = m.timed("corpus", || build_corpus(cfg))?;
        let base = m.timed("pretrain", || share(cached_base(cfg, &corpus, layout)));
        let oracle = m.timed("oracle", || share(cached_oracle(cfg, &corpus, layout)));

        let adapter_dir = cache.join(format!("adapters-{}", keys.lora));
        // Shot sets are nested in k, so the largest drawable set per seed
        // covers every smaller one.
        let mut loft_ks: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
        for c in pending.iter().map(|&i| &cells[i]).filter(|c| matches!(c.method, GenMethod::Loft(_))) {
            loft_ks.entry(c.seed).or_default().insert(c.k);
        }
        let image_adapters: BTreeMap<u64, Shared<Vec<LoraAdapter<f32>>>> = m.timed("image_adapters", || {
            loft_ks
                .par_iter()
                .map(|(&seed, ks)| {
                    let shots = ks
                        .iter()
                        .rev()
                        .find_map(|&k| make_fewshot(&corpus.pool, k, seed).ok())
                        .ok_or_else(|| format!("no drawable few-shot set for seed {seed}"));
                    let r = base.as_ref().map_err(Clone::clone).and_then(|b| {
                        shots.and_then(|shots| {
                            share(cached_image_adapters(cfg, b, &shots, seed, &adapter_dir.join(format!("seed{seed}"))))
                        })
                    });
                    (seed, r)
                })
                .collect()
        });
        let class_sets: BTreeSet<(u64, usize)> = pending
            .iter()
            .map(|&i| &cells[i])
            .filter(|c| c.method == GenMethod::PerClassLora)
            .map(|c| (c.seed, c.k))
            .collect();
        let class_adapters: BTreeMap<(u64, usize), Shared<Vec<LoraAdapter<f32>>>> = m.timed("class_adapters", || {
            class_sets
                .par_iter()
                .map(|&(seed, k)| {
                    let dir = adapter_dir.join(format!("seed{seed}/k{k}"));
                    let r = base.as_ref().map_err(Clone::clone).and_then(|b| {
                        share(
                            make_fewshot(&corpus.pool, k, seed)
                                .map_err(CliError::from)
                                .and_then(|shots| cached_class_adapters(cfg, b, &shots, seed, &dir)),
                        )
                    });
                    ((seed, k), r)
                })
                .collect()
        });

        let mut jobs: BTreeMap<&str, &Cell> = BTreeMap::new();
        for &i in &pending {
            jobs.entry(gen_keys[i].as_str()).or_insert(&cells[i]);
        }
        let jobs: Vec<(&str, &Cell)> = jobs.into_iter().collect();
        let gen_dir = cache.join("synthetic");
        let generated: BTreeMap<&str, Shared<SyntheticDataset>> = m.timed("generation", || {
            jobs.par_iter()
                .map(|&(key, cell)| {
                    let adapters: Shared<Vec<LoraAdapter<f32>>> = match &cell.method {
                        GenMethod::ClassCond => Ok(vec![]),
                        GenMethod::PerClassLora => class_adapters[&(cell.seed, cell.k)].clone(),
                        GenMethod::Loft(_) => image_adapters[&cell.seed].clone().and_then(|all| {
                            let shots = share(make_fewshot(&corpus.pool, cell.k, cell.seed).map_err(CliError::from))?;
                            let ids: BTreeSet<u64> = shots.items().iter().map(|i| i.id).collect();
                            Ok(all.into_iter().filter(|a| ids.contains(&a.source_id())).collect())
                        }),
                    };
                    let r = base.as_ref().map_err(Clone::clone).and_then(|b| {
                        adapters.and_then(|ad| {
                            share(cached_generation(&gen_dir, key, || {
                                Ok(generate_dataset(
                                    &cell.method,
                                    max_s,
                                    b,
                                    &ad,
                                    &cfg.generation.guidance,
                                    cell.seed,
                                )?)
                            }))
                        })
                    });
                    (key, r)
                })
                .collect()
        });

        let fresh: Vec<(usize, CellResult)> = m.timed("cells", || {
            pending
                .par_iter()
                .map(|&i| {
                    let cell = &cells[i];
                    let r = generated[gen_keys[i].as_str()].as_ref().map_err(Clone::clone).and_then(|synth| {
                        let oracle = oracle.as_ref().map_err(Clone::clone)?;
                        share(run_cell(cfg, cell, synth, oracle, &corpus.test))
                    });
                    (i, r.unwrap_or_else(|e| CellResult::failed(cell, e)))
                })
                .collect()
        });
        for (i, r) in fresh {
            if r.is_ok() {
                write_file(&cell_paths[i], serde_json::to_string(&r)?.as_bytes())?;
            } else {
                eprintln!("cell {} failed: {}", scatter_label(&r), r.error.as_deref().unwrap_or(""));
            }
            results[i] = Some(r);
        }
        for (stage, path) in [("base", base_cache_path(cfg, layout)), ("oracle", oracle_cache_path(cfg, layout))] {
            if path.exists() {
                m.inputs.insert(stage.into(), file_hash(&path)?);
            }
        }
    }

    let results: Vec<CellResult> = results.into_iter().map(|r| r.expect("every cell resolved")).collect();
    let classes = cfg.corpus.classes;
    let mut csv = results_header(classes);
    csv.push('\n');
    for r in &results {
        csv.push_str(&results_row(r, classes));
        csv.push('\n');
    }
    let scatter: Vec<MetricsRecord> = results
        .iter()
        .flat_map(|r| {
            let label = scatter_label(r);
            r.records.iter().map(move |rec| MetricsRecord {
                method: label.clone(),
                ..rec.clone()
            })
        })
        .collect();
    let results_path = layout.results(&format!("{name}.csv"));
    let scatter_path = layout.results(&format!("{name}_scatter.csv"));
    write_file(&results_path, csv.as_bytes())?;
    write_file(&scatter_path, export_scatter(&scatter).as_bytes())?;
    m.artifact(layout, &results_path)?;
    m.artifact(layout, &scatter_path)?;
    Ok(ExperimentOutcome {
        results,
        results_path,
        scatter_path,
        manifest: m,
        reused,
    })
}
