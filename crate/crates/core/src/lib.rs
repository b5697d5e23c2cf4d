//! Latent diffusion and bridge samplers for style transfer, with a
//! synthetic content/style testbed to measure them on.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Aliases
//! for both precisions are exported below.

pub mod config;
pub mod denoiser;
pub mod embedding;
pub mod error;
pub mod experiments;
pub mod formats;
pub mod grid;
pub mod metrics;
pub mod samplers;
pub mod scalar;
pub mod schedules;
pub mod tensor;
pub mod testbed;
pub mod training;

pub use config::ExperimentConfig;
pub use denoiser::{CondMode, Denoise, DenoiserConfig, DenoiserParams, Objective};
pub use embedding::StyleEmbedding;
pub use error::{Error, Result};
pub use grid::LatentGrid;
pub use samplers::{SamplerConfig, SamplerMode};
pub use scalar::Scalar;
pub use schedules::{BridgeSchedule, NoiseSchedule, ScheduleKind};
pub use testbed::{Testbed, TestbedConfig};
pub use training::{TrainConfig, TrainMode, Trainer};

pub type Grid32 = LatentGrid<f32>;
pub type Grid64 = LatentGrid<f64>;
pub type Denoiser32 = DenoiserParams<f32>;
pub type Denoiser64 = DenoiserParams<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
