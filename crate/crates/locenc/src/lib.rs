//! Distributed vector representations of points in 2-D space.
//!
//! Multi-scale sinusoidal location encoders (plus the full baseline family)
//! trained unsupervised on point-feature data, with ranking evaluation and
//! spatial-statistics tooling. See the README for the CLI pipeline.

pub mod analysis;
pub mod cli;
pub mod decoders;
pub mod encoder_assembly;
pub mod error;
pub mod evaluation;
pub mod feature_encoder;
pub mod neural_core;
pub mod poi_data;
pub mod rng;
pub mod space_encoders;
pub mod training;

pub use error::{Error, Result};
