//! Image-conditional latent diffusion with a transformer denoiser, at desk
//! scale: a self-contained tensor/autodiff core, the conditional DDPM math
//! with learned variances, the adaLN transformer model, pluggable latent
//! codecs, a deterministic training/sampling engine, and image-quality
//! metrics (PSNR/SSIM/UIQM).

pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod error;
pub mod tensor;

pub use diffusion::{linear_beta_schedule, respace, NoiseSchedule, RespacedSchedule};
pub use codec::{Codec, CodecSpec, LatentCodec};
pub use config::RunConfig;
pub use engine::{ScheduleSpec, TrainSetup, TrainState};
pub use model::{IcdtModel, ModelConfig, Parameters};
pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Scalar, Tensor};
