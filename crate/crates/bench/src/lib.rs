//! Shared inputs for the benchmarks.

use colorshift_core::model::{ModelConfig, ModelKind};
use colorshift_core::ImageBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[-1, 1)`.
pub fn random_batch(batch: usize, channels: usize, resolution: usize, seed: u64) -> ImageBatch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBatch::from_fn(batch, channels, resolution, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// The reduced network used for desk-scale runs.
pub fn reduced_model(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        widths: [8, 16, 32, 32],
        res_blocks: 2,
        ..ModelConfig::new(kind)
    }
}
