//! Deterministic numerical core: tensors, affine layers with hand-derived
//! gradients, AdamW, the cosine learning-rate schedule and keyed RNG streams.

mod layer;
mod optim;
mod rng;
mod scalar;
mod tensor;

pub use layer::{forward_backward, silu, silu_grad, Activation, AffineLayer, LayerGrads, LayerStack, StackTrace};
pub use optim::{cosine_lr, AdamWConfig, AdamWState};
pub use rng::{rng_stream, KeyedRng, RngKey};
pub use scalar::{gemm, Scalar, Trans};
pub use tensor::Tensor;
