//! Audio-visual forgery localization and detection from cross-modal
//! feature divergence.

pub mod checkpoint;
pub mod cli;
pub mod divergence;
pub mod error;
pub mod intervals;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod syndata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
