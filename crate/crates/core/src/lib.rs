//! Sample-wise adaptive temperature scaling for knowledge distillation.
//!
//! The crate is `no_std` (with `alloc`) and covers the numerical side of
//! the lab: stable softmax/entropy/KL kernels, adaptive temperatures, every
//! distillation objective with analytic gradients, a small MLP trained by
//! SGD with momentum, a synthetic Gaussian-mixture benchmark, the training
//! loops, and the verification harness. File formats, manifests and the CLI
//! live in the `cist` crate.
#![no_std]

extern crate alloc;

pub mod analysis;
pub mod data;
pub mod distill;
mod error;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod stats;
pub mod temperature;

pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossConfig, Method};
pub use matrix::{LogitMatrix, Matrix};
pub use numerics::SoftDistribution;
pub use temperature::{TemperatureAssignment, TemperaturePolicy};
