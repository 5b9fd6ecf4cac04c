//! Minimal reverse-mode building blocks for the score networks.

pub mod layers;
pub mod params;

pub use layers::{Conv2d, Dense, GroupNorm, Init};
pub use params::{Matrix, Param, ParamId, ParamStore};
