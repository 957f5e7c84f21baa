//! Class-conditional pixel-space diffusion: linear-β schedule, MLP noise
//! predictor, the ε-prediction objective and a guided ancestral sampler.

mod denoiser;
mod sampler;
mod schedule;
mod train;

pub use denoiser::{
    fresh_adapter, time_features, AdapterGrads, Adaptation, DenoiserArch, DenoiserGrads, DenoiserWeights, EpsModel,
    GradTarget, Gradients, NoisyBatch,
};
pub use sampler::{guided_eps, sample, sample_batch, GuidanceConfig, SampleJob};
pub use schedule::{make_schedule, q_sample, NoiseSchedule};
pub use train::{denoising_loss, diffusion_loss, draw_noisy_batch, train_base, BaseTrainConfig, LossTrace};
pub(crate) use train::name_param;
