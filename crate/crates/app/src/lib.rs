//! File formats, CLI and HTTP service around `promise-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
mod error;
pub mod service;

pub use error::{AppError, Result};
