//! Retention kernels, parallel observation prediction and a token-based world
//! model with an imagination engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f64` or `f32`). Observation
//! and action tokens are 0-indexed.

pub mod bench;
pub mod controller;
pub mod error;
pub mod init;
pub mod io;
pub mod kernel;
pub mod pop;
pub mod scalar;
pub mod stack;
pub mod store;
pub mod tokenizer;
pub mod world_model;

pub use error::{Error, Result};
pub use kernel::{HeadState, RotationAngles};
pub use pop::PredictionTokens;
pub use scalar::Scalar;
pub use stack::{LayerStates, ModelConfig, RetentionMode, StackParams};
pub use store::TrajectoryStore;
pub use tokenizer::{Codebook, LatentGrid};
pub use world_model::{
    Block, GenerationMode, ImaginationTrace, Policy, RewardMode, Sampler, TokenTrajectory,
    WorldModelBundle,
};
