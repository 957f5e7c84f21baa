//! Per-image low-rank adapters for a small pixel-space diffusion model, and
//! inference-time fusion of those adapters to generate synthetic training
//! sets.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, affine layers with analytic gradients, AdamW,
//!   cosine schedule, keyed RNG.
//! * [`diffusion`]: noise schedule, class-conditional MLP denoiser, training
//!   objective and the guided ancestral sampler.
//! * [`lora`]: adapters, per-image and per-class fine-tuning, fusion.
//! * [`datagen`]: the procedural shapes corpus.
//! * [`pipelines`]: synthetic dataset generation (class-conditional,
//!   per-class adapter, fused per-image adapters).
//! * [`downstream`]: classifiers trained from scratch and the oracle judge.
//! * [`analysis`]: recognizability, diversity, alignment FID, flip ratio.

pub mod analysis;
pub mod container;
pub mod datagen;
pub mod diffusion;
pub mod downstream;
pub mod error;
pub mod lora;
pub mod numerics;
pub mod pipelines;

pub use error::{Error, Result};

/// Hex SHA-256 of a byte buffer; used for artifact and manifest hashes.
pub fn content_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
