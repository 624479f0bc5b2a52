//! Unsupervised cross-modal hashing with adaptive structural similarity
//! preservation, plus a Hamming-ranking evaluation kit and a synthetic
//! data generator.

pub mod cli;
pub mod corrmine;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod hashnet;
pub mod objective;
pub mod pipeline;
pub mod simgraph;
pub mod trainer;

pub use error::{Error, Result};
