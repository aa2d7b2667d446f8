//! Loss-gradient attribution benchmark for small MNIST classifiers.
//!
//! The pipeline trains a classifier ([`model`]), computes the gradient of the
//! loss with respect to each test input ([`attribution`]), ranks the input
//! features, occludes the top or bottom of the ranking ([`occlusion`]) and
//! measures how accuracy or AUROC changes ([`metrics`]). [`sweep`] runs the
//! full grid over seeds, methods, directions, occlusion levels and
//! replacement values.

pub mod attribution;
pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod occlusion;
pub mod pgm;
pub mod sweep;
pub mod verify;

pub use error::{Error, Result};
