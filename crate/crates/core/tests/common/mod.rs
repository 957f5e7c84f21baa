#![allow(dead_code)]

use loft_core::datagen::LabeledImage;
use loft_core::diffusion::{DenoiserArch, DenoiserWeights};
use loft_core::numerics::RngKey;

pub fn tiny_arch() -> DenoiserArch {
    DenoiserArch {
        height: 4,
        width: 4,
        hidden: 16,
        depth: 2,
        time_features: 4,
        num_classes: 3,
        timesteps: 20,
        beta_start: 1e-3,
        beta_end: 0.2,
    }
}

pub fn tiny_base(seed: u64) -> DenoiserWeights<f32> {
    DenoiserWeights::init(tiny_arch(), &mut RngKey::new(seed).child("tiny-base", 0).stream()).unwrap()
}

/// Deterministic 4×4 image: a bright quadrant picked by `label`.
pub fn tiny_image(label: usize, id: u64) -> LabeledImage {
    let mut rng = RngKey::new(id).child("tiny-image", 0).stream();
    let (r0, c0) = [(0, 0), (0, 2), (2, 0)][label % 3];
    let pixels = (0..16)
        .map(|i| {
            let (r, c) = (i / 4, i % 4);
            let on = (r0..r0 + 2).contains(&r) && (c0..c0 + 2).contains(&c);
            let v = if on { 0.9 } else { 0.1 } + 0.05 * rng.uniform();
            v as f32
        })
        .collect();
    LabeledImage { id, label, pixels }
}
