//! Dual-path audio-visual question answering on dense `f64` tensors.

pub mod ablation;
pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod focus;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod preference;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod types;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::AvMaster;
pub use tensor::Tensor;
