//! Small convolutional encoder–decoder with hand-written reverse mode,
//! AdamW, and binary checkpoints.

pub mod adamw;
pub mod checkpoint;
pub mod layers;
mod model;
pub mod train;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{
    load_checkpoint, load_optimizer, save_checkpoint, save_optimizer, Checkpoint,
};
pub use model::{Architecture, DenoiserModel, PrecondCoeffs, Preconditioning, Tape};
pub use train::{LossWeight, TimeDist, TrainConfig};
