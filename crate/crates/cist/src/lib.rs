//! File formats, checkpoints, run manifests and the `cist` command line
//! built on top of `cist-core`.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod runlog;

pub use error::{Error, Result};
