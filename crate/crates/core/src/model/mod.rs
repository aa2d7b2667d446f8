//! Classifier variants, their losses, the trainer and checkpoints.

pub mod checkpoint;
mod train;
mod zoo;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{test_accuracy, train, EpochStats, OptimizerKind, TrainConfig, TrainHistory};
pub use zoo::{
    build_model, Architecture, Forward, GradModel, GradTargets, Head, LossKind, Pass, Prediction,
    IMAGE_PIXELS, IMAGE_SIDE,
};
