use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::AdapterMix;
use crate::numerics::RngKey;

use super::{Adaptation, EpsModel, NoiseSchedule};

/// Classifier-free guidance settings. `scale` is used when sampling,
/// `p_uncond` (conditioning dropout) when training the base model.
/// `clip_denoised` makes every reverse step go through the clean-image
/// estimate clamped to the pixel range; without it only the final output
/// is clamped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub p_uncond: f64,
    pub clip_denoised: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            scale: 2.0,
            p_uncond: 0.1,
            clip_denoised: true,
        }
    }
}

impl GuidanceConfig {
    pub fn with_scale(scale: f64) -> Self {
        GuidanceConfig {
            scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("guidance scale {} must be >= 0", self.scale)));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::InvalidArgument(format!("p_uncond {} outside [0, 1)", self.p_uncond)));
        }
        Ok(())
    }
}

/// One image to generate: conditioning class, its own RNG key, and the
/// adapters in effect (empty mix for the base model).
#[derive(Clone, Debug)]
pub struct SampleJob<'a> {
    pub class: usize,
    pub key: RngKey,
    pub mix: AdapterMix<'a, f32>,
}

/// Guided noise estimate `ε̂ = ε_null + w·(ε_class − ε_null)` for every row,
/// with both predictions made under the row's adapter mix.
///
/// `w = 1` evaluates only the conditional branch and `w = 0` only the null
/// branch, so those cases reproduce pure conditional / unconditional
/// predictions exactly.
pub fn guided_eps<M: EpsModel + ?Sized>(
    model: &M,
    z: &[f32],
    t: usize,
    classes: &[usize],
    scale: f64,
    mixes: &[AdapterMix<'_, f32>],
) -> Result<Vec<f32>> {
    let n = classes.len();
    let null = model.num_classes();
    let ts = vec![t; n];
    if scale == 1.0 {
        return model.predict(z, &ts, classes, Adaptation::PerRow(mixes));
    }
    if scale == 0.0 {
        return model.predict(z, &ts, &vec![null; n], Adaptation::PerRow(mixes));
    }
    let mut zz = Vec::with_capacity(2 * z.len());
    zz.extend_from_slice(z);
    zz.extend_from_slice(z);
    let mut tokens = classes.to_vec();
    tokens.extend(std::iter::repeat(null).take(n));
    let mut rows = mixes.to_vec();
    rows.extend_from_slice(mixes);
    let both = model.predict(&zz, &vec![t; 2 * n], &tokens, Adaptation::PerRow(&rows))?;
    let (cond, uncond) = both.split_at(z.len());
    let w = scale as f32;
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| u + w * (c - u)).collect())
}

/// Ancestral DDPM sampling for a batch of independent jobs. Each job draws
/// `z_T` and per-step noise from its own key, so results do not depend on
/// which other jobs share the batch. Outputs are clamped to `[0, 1]` at
/// the end.
pub fn sample_batch<M: EpsModel + ?Sized>(
    model: &M,
    jobs: &[SampleJob<'_>],
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<Vec<f32>>> {
    guidance.validate()?;
    let d = model.image_dim();
    let c = model.num_classes();
    if let Some(job) = jobs.iter().find(|j| j.class >= c) {
        return Err(Error::LabelOutOfRange {
            label: job.class,
            classes: c,
        });
    }
    let mut rngs: Vec<_> = jobs.iter().map(|j| j.key.stream()).collect();
    let mut z = vec![0f32; jobs.len() * d];
    for (rng, row) in rngs.iter_mut().zip(z.chunks_exact_mut(d)) {
        rng.fill_normal(row);
    }
    let classes: Vec<usize> = jobs.iter().map(|j| j.class).collect();
    let mixes: Vec<AdapterMix<'_, f32>> = jobs.iter().map(|j| j.mix.clone()).collect();
    let mut noise = vec![0f32; d];

    for t in (1..=schedule.steps()).rev() {
        let eps = guided_eps(model, &z, t, &classes, guidance.scale, &mixes)?;
        let ab = schedule.alpha_bar(t);
        let ab_prev = if t > 1 { schedule.alpha_bar(t - 1) } else { 1.0 };
        // plain update
        let c1 = (1.0 / schedule.alpha(t).sqrt()) as f32;
        let c2 = (schedule.beta(t) / (1.0 - ab).sqrt()) as f32;
        // clipped update: posterior mean from the clamped clean estimate
        let (sa, s1a) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let kx = (ab_prev.sqrt() * schedule.beta(t) / (1.0 - ab)) as f32;
        let kz = (schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab)) as f32;
        let sigma = schedule.posterior_variance(t).sqrt() as f32;
        for ((row, e), rng) in z.chunks_exact_mut(d).zip(eps.chunks_exact(d)).zip(rngs.iter_mut()) {
            for (x, &ei) in row.iter_mut().zip(e) {
                *x = if guidance.clip_denoised {
                    let x0 = ((*x - s1a * ei) / sa).clamp(0.0, 1.0);
                    kx * x0 + kz * *x
                } else {
                    c1 * (*x - c2 * ei)
                };
            }
            if t > 1 {
                rng.fill_normal(&mut noise);
                for (x, &xi) in row.iter_mut().zip(&noise) {
                    *x += sigma * xi;
                }
            }
        }
    }
    Ok(z
        .chunks_exact(d)
        .map(|row| row.iter().map(|&x| x.clamp(0.0, 1.0)).collect())
        .collect())
}

/// Generates one image of `class`. `mix` selects adapters (or fusion of
/// adapters); `None` samples the base model.
pub fn sample<M: EpsModel + ?Sized>(
    model: &M,
    class: usize,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    key: &RngKey,
    mix: Option<&AdapterMix<'_, f32>>,
) -> Result<Vec<f32>> {
    let job = SampleJob {
        class,
        key: key.clone(),
        mix: mix.cloned().unwrap_or_else(AdapterMix::empty),
    };
    Ok(sample_batch(model, &[job], guidance, schedule)?.remove(0))
}
