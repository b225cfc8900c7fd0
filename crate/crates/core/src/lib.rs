//! Hybrid continuation-attribution network for emotion recognition in
//! conversation, with a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod eae;
pub mod ece;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{HcanModel, ModelConfig, Prediction};
pub use trainer::{TrainConfig, Trainer};
