//! Classifiers trained from scratch on (synthetic) datasets, evaluation on
//! real test images, and the oracle used as judge and feature extractor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{decode_model_header, encode_model, write_atomic};
use crate::datagen::ImageDataset;
use crate::diffusion::LossTrace;
use crate::error::{Error, Result};
use crate::numerics::{cosine_lr, Activation, AdamWConfig, AdamWState, LayerStack, RngKey, Tensor};

/// Required test accuracy of the oracle.
pub const ORACLE_MIN_ACCURACY: f64 = 0.95;
/// Required real training images per class for the oracle.
pub const ORACLE_MIN_PER_CLASS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![128, 128],
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            warmup_frac: 0.05,
        }
    }
}

/// Anything that labels images; lets evaluation run on stubs.
pub trait Classify {
    fn num_classes(&self) -> usize;
    /// `pixels` holds `n` images back to back.
    fn predict(&self, pixels: &[f32], n: usize) -> Result<Vec<usize>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedClassifier {
    network: LayerStack<f32>,
    pub config: ClassifierConfig,
    pub seed: u64,
    pub trace: LossTrace,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    widths: Vec<usize>,
    config: ClassifierConfig,
    seed: u64,
}

impl TrainedClassifier {
    pub fn network(&self) -> &LayerStack<f32> {
        &self.network
    }

    pub fn logits(&self, pixels: &[f32], n: usize) -> Result<Vec<f32>> {
        self.network.forward(pixels, n)
    }

    pub fn feature_dim(&self) -> usize {
        let layers = self.network.layers();
        layers[layers.len() - 1].d_in()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut widths = vec![self.network.d_in()];
        widths.extend(self.network.layers().iter().map(|l| l.d_out()));
        let desc = Descriptor {
            kind: "classifier".into(),
            widths,
            config: self.config.clone(),
            seed: self.seed,
        };
        let params = self.network.params();
        let blobs: Vec<&[f32]> = params.iter().map(|p| p.data()).collect();
        encode_model(&desc, &blobs)
    }

    /// Restores weights; the loss trace is not part of the checkpoint.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (desc, mut r): (Descriptor, _) = decode_model_header(bytes)?;
        if desc.kind != "classifier" {
            return Err(Error::Malformed(format!("expected a classifier checkpoint, found {:?}", desc.kind)));
        }
        if desc.widths.len() < 2 || desc.widths.contains(&0) {
            return Err(Error::Malformed(format!("bad layer widths {:?}", desc.widths)));
        }
        let mut network = LayerStack::<f32>::init(&desc.widths, Activation::Silu, &mut RngKey::new(0).stream())?;
        let names = network.param_names();
        for (p, name) in network.params_mut().into_iter().zip(names) {
            let data = r.f32s(p.len(), &name)?;
            p.data_mut().copy_from_slice(&data);
        }
        r.expect_end()?;
        Ok(TrainedClassifier {
            network,
            config: desc.config,
            seed: desc.seed,
            trace: LossTrace::default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl Classify for TrainedClassifier {
    fn num_classes(&self) -> usize {
        self.network.d_out()
    }

    fn predict(&self, pixels: &[f32], n: usize) -> Result<Vec<usize>> {
        let logits = self.logits(pixels, n)?;
        Ok(logits.chunks_exact(self.num_classes()).map(argmax).collect())
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
fn cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> (f64, Vec<f32>) {
    let n = labels.len();
    let mut grad = vec![0f32; logits.len()];
    let mut loss = 0.0;
    for ((row, g), &y) in logits.chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(labels) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + m - row[y] as f64;
        for (j, (gj, e)) in g.iter_mut().zip(&exps).enumerate() {
            let p = e / z - if j == y { 1.0 } else { 0.0 };
            *gj = (p / n as f64) as f32;
        }
    }
    (loss / n as f64, grad)
}

/// Cross-entropy training of a fresh MLP `pixels → hidden… → C` on `dataset`.
pub fn train_classifier(
    dataset: &ImageDataset,
    num_classes: usize,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<TrainedClassifier> {
    if dataset.is_empty() {
        return Err(Error::InsufficientData("classifier training needs a non-empty dataset".into()));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::InvalidArgument("batch_size and lr must be positive".into()));
    }
    if let Some(bad) = dataset.items().iter().find(|i| i.label >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad.label,
            classes: num_classes,
        });
    }
    let d = dataset.pixels_per_image();
    let mut widths = vec![d];
    widths.extend(&config.hidden);
    widths.push(num_classes);
    let key = RngKey::new(seed).child("classifier", 0);
    let mut network = LayerStack::<f32>::init(&widths, Activation::Silu, &mut key.child("init", 0).stream())?;
    let mut opt = AdamWState::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let items = dataset.items();
    let per_epoch = items.len().div_ceil(config.batch_size);
    let total = config.epochs * per_epoch;
    let warmup = (total as f64 * config.warmup_frac).round() as usize;
    let mut trace = LossTrace::default();
    let mut x = Vec::with_capacity(config.batch_size * d);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = key.child("epoch", epoch as u64).stream().choose_distinct(items.len(), items.len());
        for batch in order.chunks(config.batch_size) {
            x.clear();
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| {
                    x.extend_from_slice(&items[i].pixels);
                    items[i].label
                })
                .collect();
            let run = network.forward_trace(&x, batch.len())?;
            let (loss, d_logits) = cross_entropy(run.output(), &labels, num_classes);
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            trace.push(step, loss);
            let (grads, _) = network.backward(&run, &d_logits);
            let flat: Vec<Tensor<f32>> = grads.into_iter().flat_map(|g| [g.weight, g.bias]).collect();
            step += 1;
            let lr = cosine_lr(step, total, config.lr, warmup);
            if lr > 0.0 {
                opt.step(&mut network.params_mut(), &flat, lr)?;
            }
        }
    }
    Ok(TrainedClassifier {
        network,
        config: config.clone(),
        seed,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    /// Correctness of every test example, in dataset order.
    pub correct: Vec<bool>,
}

pub fn evaluate<C: Classify + ?Sized>(classifier: &C, test: &ImageDataset) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InsufficientData("empty test set".into()));
    }
    let pixels: Vec<f32> = test.items().iter().flat_map(|i| i.pixels.iter().copied()).collect();
    let predicted = classifier.predict(&pixels, test.len())?;
    let classes = classifier.num_classes();
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    let correct: Vec<bool> = test
        .items()
        .iter()
        .zip(&predicted)
        .map(|(it, &p)| {
            if it.label < classes {
                totals[it.label] += 1;
                hits[it.label] += (p == it.label) as usize;
            }
            p == it.label
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        correct,
    })
}

/// Trains the judge on abundant real data and checks it on `test`.
pub fn train_oracle(
    train: &ImageDataset,
    test: &ImageDataset,
    num_classes: usize,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(TrainedClassifier, EvalReport)> {
    let counts = train.class_counts(num_classes);
    if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n < ORACLE_MIN_PER_CLASS) {
        return Err(Error::InsufficientData(format!(
            "oracle needs {ORACLE_MIN_PER_CLASS} images per class, class {c} has {n}"
        )));
    }
    let oracle = train_classifier(train, num_classes, config, seed)?;
    let report = evaluate(&oracle, test)?;
    if report.accuracy < ORACLE_MIN_ACCURACY {
        return Err(Error::OracleTooWeak {
            accuracy: report.accuracy,
            required: ORACLE_MIN_ACCURACY,
        });
    }
    Ok((oracle, report))
}

/// Penultimate-layer activations, `n × feature_dim`, row-major.
pub fn extract_features(oracle: &TrainedClassifier, pixels: &[f32], n: usize) -> Result<Vec<f32>> {
    oracle.network.features(pixels, n)
}

pub fn dataset_features(oracle: &TrainedClassifier, images: &[&[f32]]) -> Result<Vec<f32>> {
    let pixels: Vec<f32> = images.iter().flat_map(|i| i.iter().copied()).collect();
    extract_features(oracle, &pixels, images.len())
}

pub fn eval_csv_header(num_classes: usize) -> String {
    let mut h = String::from("dataset,seed,accuracy");
    for c in 0..num_classes {
        h.push_str(&format!(",class_{c}"));
    }
    h
}

pub fn eval_csv_row(dataset_id: &str, seed: u64, report: &EvalReport) -> String {
    let mut row = format!("{dataset_id},{seed},{:.6}", report.accuracy);
    for pc in &report.per_class {
        match pc {
            Some(a) => row.push_str(&format!(",{a:.6}")),
            None => row.push(','),
        }
    }
    row
}
