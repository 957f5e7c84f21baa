//! Synthetic dataset generation: class-conditional sampling, one adapter
//! per class, and fused per-image adapters.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::datagen::{image_id, make_fewshot, ImageDataset, LabeledImage, Regime, Split};
use crate::diffusion::{sample_batch, DenoiserWeights, GuidanceConfig, SampleJob};
use crate::error::{Error, Result};
use crate::lora::{
    adapter_to_bytes, finetune_class_set, finetune_single_image, sample_fusion, save_adapter, AdapterMix, FusionSpec, LambdaSampler,
    LoraAdapter, LoraConfig, CLASS_SOURCE_ID,
};
use crate::numerics::RngKey;

/// Jobs sampled together in one batched reverse process.
const SAMPLE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub enum GenMethod {
    /// Base model with the class token only.
    ClassCond,
    /// One adapter fitted on all shots of a class.
    PerClassLora,
    /// Per-image adapters fused per generated image.
    Loft(LambdaSampler),
}

impl GenMethod {
    /// Short stable name, e.g. `loft-fixed:0.5`.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for GenMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenMethod::ClassCond => f.write_str("classcond"),
            GenMethod::PerClassLora => f.write_str("perclass"),
            GenMethod::Loft(s) => write!(f, "loft-{s}"),
        }
    }
}

impl FromStr for GenMethod {
    type Err = Error;

    /// `classcond`, `perclass`, `loft` (λ = 0.5) or `loft-<sampler>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classcond" => Ok(GenMethod::ClassCond),
            "perclass" => Ok(GenMethod::PerClassLora),
            "loft" => Ok(GenMethod::Loft(LambdaSampler::Fixed(0.5))),
            other => match other.strip_prefix("loft-") {
                Some(sampler) => Ok(GenMethod::Loft(sampler.parse()?)),
                None => Err(Error::InvalidArgument(format!(
                    "unknown method {other:?} (expected classcond, perclass, loft or loft-<sampler>)"
                ))),
            },
        }
    }
}

/// Provenance of one generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub class: usize,
    pub index: usize,
    /// Key of the sampling noise.
    pub rng_key: String,
    /// Adapter source ids and weights; empty for the base model.
    pub sources: Vec<u64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub method: String,
    pub seed: u64,
    pub per_class: usize,
    pub guidance: GuidanceConfig,
    pub base_model: String,
    /// Adapter content hash keyed `class/source id`.
    pub adapters: BTreeMap<String, String>,
    pub images: Vec<ImageRecord>,
}

impl GenerationManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(crate::content_hash(self.to_json()?.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: ImageDataset,
    pub manifest: GenerationManifest,
}

impl SyntheticDataset {
    /// The first `n` images of every class with their records; identical to
    /// generating with `per_class = n` under the same seed.
    pub fn prefix(&self, n: usize) -> SyntheticDataset {
        let dataset = self.dataset.take_per_class(n);
        let keep: std::collections::HashSet<u64> = dataset.items().iter().map(|i| i.id).collect();
        let mut manifest = self.manifest.clone();
        manifest.per_class = n.min(manifest.per_class);
        manifest.images.retain(|r| keep.contains(&r.id));
        SyntheticDataset { dataset, manifest }
    }

    pub fn save(&self, dataset_path: &Path, manifest_path: &Path) -> Result<()> {
        self.dataset.save(dataset_path)?;
        write_atomic(manifest_path, self.manifest.to_json()?.as_bytes())
    }
}

/// One image to generate, before sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedImage {
    pub class: usize,
    pub index: usize,
    pub key: RngKey,
    pub spec: Option<FusionSpec>,
}

fn image_key(seed: u64, class: usize, index: usize) -> RngKey {
    RngKey::new(seed)
        .child("gen", 0)
        .child("class", class as u64)
        .child("index", index as u64)
}

/// Checks adapter coverage and decides, for every image, its noise key and
/// fusion spec. Fusion picks come from a key separate from the noise, so
/// image `(class, i)` is the same for every `per_class ≥ i + 1`.
pub fn plan_generation(
    method: &GenMethod,
    adapters: &[LoraAdapter<f32>],
    num_classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<Vec<PlannedImage>> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be at least 1".into()));
    }
    let per_image = |a: &&LoraAdapter<f32>| a.source_id() != CLASS_SOURCE_ID;
    let by_class: Vec<Vec<&LoraAdapter<f32>>> = (0..num_classes)
        .map(|c| {
            adapters
                .iter()
                .filter(|a| a.class() == c)
                .filter(|a| match method {
                    GenMethod::PerClassLora => !per_image(a),
                    _ => per_image(a),
                })
                .collect()
        })
        .collect();
    let missing: Vec<usize> = match method {
        GenMethod::ClassCond => vec![],
        _ => (0..num_classes).filter(|&c| by_class[c].is_empty()).collect(),
    };
    if !missing.is_empty() {
        return Err(Error::MissingAdapters(missing));
    }
    let mut plan = Vec::with_capacity(num_classes * per_class);
    for (class, pool) in by_class.iter().enumerate() {
        for index in 0..per_class {
            let key = image_key(seed, class, index);
            let spec = match method {
                GenMethod::ClassCond => None,
                GenMethod::PerClassLora => Some(FusionSpec::singleton(class, pool[0].source_id())),
                GenMethod::Loft(sampler) => {
                    let mut rng = key.child("fusion", 0).stream();
                    Some(sample_fusion(pool, sampler, &mut rng)?)
                }
            };
            plan.push(PlannedImage {
                class,
                index,
                key: key.child("noise", 0),
                spec,
            });
        }
    }
    Ok(plan)
}

/// Runs the guided sampler for every planned image. Chunks are independent
/// and may run in parallel; each image depends only on its own key.
pub fn render_plan(
    base: &DenoiserWeights<f32>,
    adapters: &[LoraAdapter<f32>],
    plan: &[PlannedImage],
    guidance: &GuidanceConfig,
) -> Result<Vec<Vec<f32>>> {
    let schedule = base.arch().schedule()?;
    let mixes = plan
        .iter()
        .map(|p| match &p.spec {
            None => Ok(AdapterMix::empty()),
            Some(spec) => AdapterMix::resolve(spec, adapters),
        })
        .collect::<Result<Vec<_>>>()?;
    let chunks: Vec<Result<Vec<Vec<f32>>>> = plan
        .par_chunks(SAMPLE_CHUNK)
        .zip(mixes.par_chunks(SAMPLE_CHUNK))
        .map(|(ps, ms)| {
            let jobs: Vec<SampleJob<'_>> = ps
                .iter()
                .zip(ms)
                .map(|(p, m)| SampleJob {
                    class: p.class,
                    key: p.key.clone(),
                    mix: m.clone(),
                })
                .collect();
            sample_batch(base, &jobs, guidance, &schedule)
        })
        .collect();
    let mut out = Vec::with_capacity(plan.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Generates `per_class` labelled images for every class.
pub fn generate_dataset(
    method: &GenMethod,
    per_class: usize,
    base: &DenoiserWeights<f32>,
    adapters: &[LoraAdapter<f32>],
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<SyntheticDataset> {
    let arch = base.arch();
    let plan = plan_generation(method, adapters, arch.num_classes, per_class, seed)?;
    let images = render_plan(base, adapters, &plan, guidance)?;
    assemble(method, base, adapters, &plan, images, guidance, per_class, seed)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn assemble(
    method: &GenMethod,
    base: &DenoiserWeights<f32>,
    adapters: &[LoraAdapter<f32>],
    plan: &[PlannedImage],
    images: Vec<Vec<f32>>,
    guidance: &GuidanceConfig,
    per_class: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    let mut used = BTreeMap::new();
    let mut items = Vec::with_capacity(plan.len());
    let mut records = Vec::with_capacity(plan.len());
    for (p, pixels) in plan.iter().zip(images) {
        let id = image_id(Regime::Synthetic, Split::Train, p.class, p.index);
        let (sources, weights) = match &p.spec {
            Some(s) => (s.sources.clone(), s.weights.clone()),
            None => (vec![], vec![]),
        };
        for src in &sources {
            if !used.contains_key(&(p.class, *src)) {
                let a = adapters
                    .iter()
                    .find(|a| a.class() == p.class && a.source_id() == *src)
                    .expect("resolved during rendering");
                used.insert((p.class, *src), crate::content_hash(&adapter_to_bytes(a)));
            }
        }
        records.push(ImageRecord {
            id,
            class: p.class,
            index: p.index,
            rng_key: p.key.to_string(),
            sources,
            weights,
        });
        items.push(LabeledImage {
            id,
            label: p.class,
            pixels,
        });
    }
    let arch = base.arch();
    Ok(SyntheticDataset {
        dataset: ImageDataset::new(arch.height, arch.width, items)?,
        manifest: GenerationManifest {
            method: method.label(),
            seed,
            per_class,
            guidance: guidance.clone(),
            base_model: base.content_hash()?,
            adapters: used.into_iter().map(|((c, s), h)| (format!("{c}/{s}"), h)).collect(),
            images: records,
        },
    })
}

/// Key of the per-image fit of `image` under `seed`. Depends on the image,
/// not on `k`, so adapters are shared between nested few-shot sets.
pub fn adapter_key(seed: u64, image: &LabeledImage) -> RngKey {
    RngKey::new(seed)
        .child("lora", 0)
        .child("class", image.label as u64)
        .child("image", image.id)
}

/// Fits one adapter per image of `shots`, in parallel.
pub fn fit_image_adapters(
    base: &DenoiserWeights<f32>,
    shots: &ImageDataset,
    config: &LoraConfig,
    seed: u64,
) -> Result<Vec<LoraAdapter<f32>>> {
    shots
        .items()
        .par_iter()
        .map(|img| finetune_single_image(base, img, config, &adapter_key(seed, img)).map(|(a, _)| a))
        .collect()
}

/// Key of the class-`class` fit on the first `k` shots under `seed`.
pub fn class_adapter_key(seed: u64, class: usize, k: usize) -> RngKey {
    RngKey::new(seed)
        .child("lora-class", class as u64)
        .child("shots", k as u64)
}

/// Fits one adapter per class on all of that class's shots, in parallel.
pub fn fit_class_adapters(
    base: &DenoiserWeights<f32>,
    shots: &ImageDataset,
    config: &LoraConfig,
    seed: u64,
) -> Result<Vec<LoraAdapter<f32>>> {
    let classes = base.arch().num_classes;
    (0..classes)
        .into_par_iter()
        .map(|c| {
            let images: Vec<&LabeledImage> = shots.of_class(c).collect();
            if images.is_empty() {
                return Err(Error::InsufficientData(format!("no shots of class {c}")));
            }
            let key = class_adapter_key(seed, c, images.len());
            finetune_class_set(base, &images, c, config, &key).map(|(a, _)| a)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoftConfig {
    pub lora: LoraConfig,
    pub sampler: LambdaSampler,
    pub guidance: GuidanceConfig,
}

impl Default for LoftConfig {
    fn default() -> Self {
        LoftConfig {
            lora: LoraConfig::default(),
            sampler: LambdaSampler::Fixed(0.5),
            guidance: GuidanceConfig::default(),
        }
    }
}

/// Draws `k` shots per class from `pool`, fits one adapter per shot, then
/// generates `per_class` images per class from fused adapter pairs. With
/// `out_dir`, every adapter, the dataset and its manifest are written there.
pub fn run_loft_end_to_end(
    base: &DenoiserWeights<f32>,
    pool: &ImageDataset,
    k: usize,
    per_class: usize,
    config: &LoftConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(SyntheticDataset, Vec<LoraAdapter<f32>>)> {
    let shots = make_fewshot(pool, k, seed)?;
    let adapters = fit_image_adapters(base, &shots, &config.lora, seed)?;
    let synth = generate_dataset(
        &GenMethod::Loft(config.sampler.clone()),
        per_class,
        base,
        &adapters,
        &config.guidance,
        seed,
    )?;
    if let Some(dir) = out_dir {
        for a in &adapters {
            save_adapter(a, &dir.join("adapters").join(adapter_file_name(a)))?;
        }
        synth.save(&dir.join("synthetic.lfds"), &dir.join("manifest.json"))?;
    }
    Ok((synth, adapters))
}

/// `c<class>_<source id in hex>.lfta`; `c<class>_class.lfta` for per-class adapters.
pub fn adapter_file_name(a: &LoraAdapter<f32>) -> String {
    adapter_file_name_for(a.class(), a.source_id())
}

pub fn adapter_file_name_for(class: usize, source_id: u64) -> String {
    if source_id == CLASS_SOURCE_ID {
        format!("c{class}_class.lfta")
    } else {
        format!("c{class}_{source_id:016x}.lfta")
    }
}
