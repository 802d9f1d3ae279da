//! Attention-augmented feature extraction with normalizing-flow density
//! estimation for image-level anomaly detection.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod flow;
pub mod imageops;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod residual;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
