//! Low-rank adapters on the denoiser's affine layers: per-image and
//! per-class fitting, branch-wise fusion, fusion-weight sampling and the
//! `LFTA` adapter file.

mod adapter;
mod finetune;
mod fusion;
mod io;

pub use adapter::{LayerShape, LoraAdapter, LoraLayer, CLASS_SOURCE_ID, LORA_SCALE};
pub use finetune::{finetune_class_set, finetune_single_image, image_denoising_loss, LoraConfig};
pub use fusion::{
    fused_forward, materialize_delta, sample_fusion, AdapterMix, FusionSpec, LambdaSampler, SIMPLEX_TOL,
};
pub use io::{adapter_from_bytes, adapter_to_bytes, load_adapter, save_adapter, ADAPTER_MAGIC, ADAPTER_VERSION};
