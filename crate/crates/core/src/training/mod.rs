//! Objectives, the optimizer, the two-stage training loop and checkpoints.

mod checkpoint;
mod losses;
mod optim;
mod trainer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_model, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use losses::{loss_denoiser, loss_prob, loss_wta, loss_wta_value, renormalized_weights, weighted_error, wta_winners};
pub use optim::Adam;
pub use trainer::{save_log, write_log, LogRow, Stage, TimeWeights, TrainConfig, TrainData, Trainer, WeightPreset};
