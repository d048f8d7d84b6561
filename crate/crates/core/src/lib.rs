//! Few-shot part segmentation with part-aware prompt learning.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod harness;
pub mod json;
pub mod losses;
pub mod model;
pub mod params;
pub mod prompt;
pub mod prototypes;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{ModelConfig, PartSegModel};
pub use tensor::Tensor;
pub use trainer::Trainer;
