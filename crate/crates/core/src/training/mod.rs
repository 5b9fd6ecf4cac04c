//! Adam optimization with an EMA shadow, checkpointing and loss logging.

pub mod adam;
pub mod checkpoint;
pub mod ema;
mod train;

pub use adam::{AdamHyper, AdamState};
pub use checkpoint::Checkpoint;
pub use ema::EmaState;
pub use train::{gradients, holdout_split, train, TrainConfig, TrainOptions, Trainer, CHECKPOINT_DIR, LOSS_LOG};
