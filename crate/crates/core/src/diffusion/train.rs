use serde::{Deserialize, Serialize};

use crate::datagen::ImageDataset;
use crate::error::{Error, Result};
use crate::numerics::{cosine_lr, AdamWConfig, AdamWState, KeyedRng, RngKey};

use super::schedule::q_sample_raw;
use super::{Adaptation, DenoiserArch, DenoiserWeights, EpsModel, GradTarget, Gradients, NoiseSchedule, NoisyBatch};

/// Noises every example once: `t ~ U{1..T}`, `ε ~ N(0, I)`, and with
/// probability `p_uncond` the class token is replaced by the null token.
pub fn draw_noisy_batch(
    examples: &[(&[f32], usize)],
    num_classes: usize,
    schedule: &NoiseSchedule,
    rng: &mut KeyedRng,
    p_uncond: f64,
) -> Result<NoisyBatch<f32>> {
    if examples.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let d = examples[0].0.len();
    let mut batch = NoisyBatch {
        z_t: Vec::with_capacity(examples.len() * d),
        eps: Vec::with_capacity(examples.len() * d),
        t: Vec::with_capacity(examples.len()),
        tokens: Vec::with_capacity(examples.len()),
    };
    let mut eps = vec![0f32; d];
    for &(x, label) in examples {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if x.len() != d {
            return Err(Error::shape("batch", format!("{d} pixels"), x.len()));
        }
        let t = 1 + rng.below(schedule.steps());
        rng.fill_normal(&mut eps);
        let dropped = p_uncond > 0.0 && rng.uniform() < p_uncond;
        batch.z_t.extend(q_sample_raw(x, &eps, schedule.alpha_bar(t)));
        batch.eps.extend_from_slice(&eps);
        batch.t.push(t);
        batch.tokens.push(if dropped { num_classes } else { label });
    }
    Ok(batch)
}

/// Mean squared error between true and predicted noise over every element.
pub fn denoising_loss<M: EpsModel + ?Sized>(model: &M, batch: &NoisyBatch<f32>, adapt: Adaptation<'_, f32>) -> Result<f32> {
    let pred = model.predict(&batch.z_t, &batch.t, &batch.tokens, adapt)?;
    let sum: f64 = pred
        .iter()
        .zip(&batch.eps)
        .map(|(&p, &e)| ((p - e) as f64).powi(2))
        .sum();
    Ok((sum / pred.len() as f64) as f32)
}

/// Training objective on one freshly noised batch, with gradients for the
/// requested parameter set (full model or the shared adapter factors).
pub fn diffusion_loss(
    weights: &DenoiserWeights<f32>,
    examples: &[(&[f32], usize)],
    schedule: &NoiseSchedule,
    rng: &mut KeyedRng,
    p_uncond: f64,
    adapt: Adaptation<'_, f32>,
    target: GradTarget,
) -> Result<(f32, Gradients<f32>)> {
    let batch = draw_noisy_batch(examples, weights.arch().num_classes, schedule, rng, p_uncond)?;
    weights.loss_and_grads(&batch, adapt, target)
}

/// `(step, loss)` pairs from a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub points: Vec<(usize, f64)>,
}

impl LossTrace {
    pub fn push(&mut self, step: usize, loss: f64) {
        self.points.push((step, loss));
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn window_mean(points: &[(usize, f64)]) -> f64 {
        points.iter().map(|p| p.1).sum::<f64>() / points.len().max(1) as f64
    }

    /// Mean loss over the first `frac` of recorded steps (at least one).
    pub fn head_mean(&self, frac: f64) -> f64 {
        let k = ((self.len() as f64 * frac).ceil() as usize).clamp(1, self.len().max(1));
        Self::window_mean(&self.points[..k.min(self.len())])
    }

    /// Mean loss over the last `frac` of recorded steps (at least one).
    pub fn tail_mean(&self, frac: f64) -> f64 {
        let k = ((self.len() as f64 * frac).ceil() as usize).clamp(1, self.len().max(1));
        Self::window_mean(&self.points[self.len().saturating_sub(k)..])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.points {
            s.push_str(&format!("{step},{loss}\n"));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub p_uncond: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            steps: 8000,
            batch_size: 128,
            lr: 1e-3,
            warmup_frac: 0.05,
            weight_decay: 0.0,
            p_uncond: 0.1,
            seed: 0,
        }
    }
}

/// Trains the class-conditional denoiser from scratch on `dataset`.
pub fn train_base(
    dataset: &ImageDataset,
    arch: &DenoiserArch,
    config: &BaseTrainConfig,
) -> Result<(DenoiserWeights<f32>, LossTrace)> {
    if dataset.is_empty() {
        return Err(Error::InsufficientData("base training needs a non-empty dataset".into()));
    }
    if dataset.pixels_per_image() != arch.image_dim() {
        return Err(Error::shape("in", format!("{} pixels", arch.image_dim()), dataset.pixels_per_image()));
    }
    let missing: Vec<usize> = (0..arch.num_classes)
        .filter(|&c| !dataset.items().iter().any(|it| it.label == c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::InsufficientData(format!("dataset has no images of classes {missing:?}")));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let schedule = arch.schedule()?;
    let key = RngKey::new(config.seed).child("pretrain", 0);
    let mut weights = DenoiserWeights::<f32>::init(arch.clone(), &mut key.child("init", 0).stream())?;
    let mut opt = AdamWState::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let warmup = (config.steps as f64 * config.warmup_frac).round() as usize;
    let names = weights.param_names();
    let mut trace = LossTrace::default();
    let items = dataset.items();

    for step in 0..config.steps {
        let mut rng = key.child("step", step as u64).stream();
        let examples: Vec<(&[f32], usize)> = (0..config.batch_size)
            .map(|_| {
                let it = &items[rng.below(items.len())];
                (it.pixels.as_slice(), it.label)
            })
            .collect();
        let (loss, grads) = diffusion_loss(
            &weights,
            &examples,
            &schedule,
            &mut rng,
            config.p_uncond,
            Adaptation::Base,
            GradTarget::Base,
        )?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss as f64,
            });
        }
        trace.push(step, loss as f64);
        let lr = cosine_lr(step + 1, config.steps, config.lr, warmup);
        if lr > 0.0 {
            let flat = grads.base.expect("base gradients requested").flatten();
            opt.step(&mut weights.params_mut(), &flat, lr).map_err(|e| name_param(e, &names))?;
        }
    }
    Ok((weights, trace))
}

/// Rewrites `parameter #i` in optimizer errors to the parameter's name.
pub(crate) fn name_param(err: Error, names: &[String]) -> Error {
    match err {
        Error::NonFiniteGradient(p) => {
            let named = p
                .strip_prefix("parameter #")
                .and_then(|i| i.parse::<usize>().ok())
                .and_then(|i| names.get(i).cloned())
                .unwrap_or(p);
            Error::NonFiniteGradient(named)
        }
        other => other,
    }
}
