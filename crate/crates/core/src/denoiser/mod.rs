//! Trainable toy denoisers, their optimizer, the combined objective, and
//! the training/inference loops.

pub mod adam;
pub mod checkpoint;
pub mod model;
pub mod train;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use model::{backward, forward, forward_traced, Architecture, ForwardTrace, ModelParams, ParamBlock};
pub use train::{
    combined_loss, denoise_volume, train, EpochLog, LossComponents, LossConfig, TrainConfig, TrainLog,
};
