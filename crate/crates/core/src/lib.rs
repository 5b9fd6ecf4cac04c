//! Score-based diffusion on a variance-exploding SDE, with a baseline U-net
//! score network and a mean-bypass variant that predicts the spatial mean of
//! the score with a separate dense network.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fft;
pub mod fields;
pub mod loss;
pub mod model;
pub mod nn;
pub mod real;
pub mod run;
pub mod sampler;
pub mod schedule;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use fields::{demean, recompose, spatial_mean, ChannelMean, ImageBatch};
pub use model::{ModelConfig, ModelKind, ScoreModel};
pub use real::Real;
pub use schedule::DiffusionSchedule;
