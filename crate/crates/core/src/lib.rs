//! Two-stage world-guided policy learning at desk scale.
//!
//! Stage I trains a future encoder that compresses frozen features of future
//! frames into condition tokens, and an action head conditioned on them.
//! Stage II freezes the encoder and teaches the policy backbone to predict
//! those tokens itself, so inference needs only the current frame.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod future_encoder;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
