//! Deep-kernel sub-sampled TDNN acoustic models with banded-convolution and
//! Grid-RNN front-ends, exact gradients, and a small training harness.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod frontends;
pub mod gradcheck;
pub mod kernels;
pub mod numerics;
pub mod params;
pub mod tdnn;
pub mod training;

pub use error::{Error, Result};
