use serde::{Deserialize, Serialize};

use crate::datagen::LabeledImage;
use crate::diffusion::{
    denoising_loss, diffusion_loss, draw_noisy_batch, fresh_adapter, name_param, Adaptation, DenoiserWeights,
    GradTarget, LossTrace,
};
use crate::error::{Error, Result};
use crate::numerics::{cosine_lr, AdamWConfig, AdamWState, RngKey};

use super::{AdapterMix, LoraAdapter, CLASS_SOURCE_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Noised copies `(t, ε)` of every training image per optimizer step.
    pub draws_per_step: usize,
    /// Probability of fitting against the null token instead of the label.
    pub p_uncond: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 2,
            steps: 300,
            lr: 1e-3,
            warmup_frac: 0.0,
            weight_decay: 0.01,
            draws_per_step: 16,
            p_uncond: 0.0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.draws_per_step == 0 {
            return Err(Error::InvalidArgument("rank and draws_per_step must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::InvalidArgument("warmup_frac and p_uncond must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Fits one adapter to a single real image, conditioned on its label.
/// The base weights are only read.
pub fn finetune_single_image(
    base: &DenoiserWeights<f32>,
    image: &LabeledImage,
    config: &LoraConfig,
    key: &RngKey,
) -> Result<(LoraAdapter<f32>, LossTrace)> {
    fit(base, &[image], image.label, image.id, config, key)
}

/// Fits one shared adapter to every image of one class; each step batches
/// `draws_per_step` noised copies of all `k` images.
pub fn finetune_class_set(
    base: &DenoiserWeights<f32>,
    images: &[&LabeledImage],
    label: usize,
    config: &LoraConfig,
    key: &RngKey,
) -> Result<(LoraAdapter<f32>, LossTrace)> {
    if let Some(bad) = images.iter().find(|i| i.label != label) {
        return Err(Error::InvalidArgument(format!(
            "image {} has label {} in a class-{label} fit",
            bad.id, bad.label
        )));
    }
    fit(base, images, label, CLASS_SOURCE_ID, config, key)
}

fn fit(
    base: &DenoiserWeights<f32>,
    images: &[&LabeledImage],
    label: usize,
    source_id: u64,
    config: &LoraConfig,
    key: &RngKey,
) -> Result<(LoraAdapter<f32>, LossTrace)> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::InsufficientData("adapter fit needs at least one image".into()));
    }
    let arch = base.arch();
    if label >= arch.num_classes {
        return Err(Error::LabelOutOfRange {
            label,
            classes: arch.num_classes,
        });
    }
    let schedule = arch.schedule()?;
    let mut adapter = fresh_adapter(base, config.rank, label, source_id, &mut key.child("init", 0).stream())?;
    let names = adapter.param_names();
    let mut opt = AdamWState::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let warmup = (config.steps as f64 * config.warmup_frac).round() as usize;
    let examples: Vec<(&[f32], usize)> = (0..config.draws_per_step)
        .flat_map(|_| images.iter().map(|i| (i.pixels.as_slice(), label)))
        .collect();
    let mut trace = LossTrace::default();

    for step in 0..config.steps {
        let mut rng = key.child("step", step as u64).stream();
        let (loss, grads) = {
            let mix = AdapterMix::single(&adapter);
            diffusion_loss(
                base,
                &examples,
                &schedule,
                &mut rng,
                config.p_uncond,
                Adaptation::Shared(&mix),
                GradTarget::Adapters,
            )?
        };
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss as f64,
            });
        }
        trace.push(step, loss as f64);
        let lr = cosine_lr(step + 1, config.steps, config.lr, warmup);
        if lr > 0.0 {
            let flat = grads.adapters.into_iter().next().expect("one adapter term").flatten();
            opt.step(&mut adapter.params_mut(), &flat, lr).map_err(|e| name_param(e, &names))?;
        }
    }
    Ok((adapter, trace))
}

/// Denoising loss of `image` under a fixed set of `draws` noisings derived
/// from `key`, so base and adapted models can be compared on identical
/// `(t, ε)` pairs.
pub fn image_denoising_loss(
    model: &DenoiserWeights<f32>,
    image: &LabeledImage,
    adapter: Option<&LoraAdapter<f32>>,
    draws: usize,
    key: &RngKey,
) -> Result<f64> {
    let arch = model.arch();
    let examples = vec![(image.pixels.as_slice(), image.label); draws];
    let batch = draw_noisy_batch(&examples, arch.num_classes, &arch.schedule()?, &mut key.stream(), 0.0)?;
    let loss = match adapter {
        Some(a) => denoising_loss(model, &batch, Adaptation::Shared(&AdapterMix::single(a)))?,
        None => denoising_loss(model, &batch, Adaptation::Base)?,
    };
    Ok(loss as f64)
}
