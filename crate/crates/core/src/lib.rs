//! Retrieval-augmented motion forecasting: a frozen bank of trajectory
//! priors, straight-through anchor retrieval, a factorized scene encoder and
//! an anchor-seeded refinement decoder, trained on synthetic driving scenes.

pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod params;
pub mod pgqa;
pub mod projection;
pub mod retrieval;
pub mod scene;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
