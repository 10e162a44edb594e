//! One-encoder multi-decoder segmentation networks for multi-rater data,
//! with optional attention gates and variational decoders.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod training;
pub mod variational;

pub use error::{Error, Result};
pub use grid::{Grid, Mask};
pub use network::{build_model, Model, NetworkConfig, PredictionSet, Variant};
