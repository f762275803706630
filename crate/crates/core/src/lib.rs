//! Frozen promptable segmentation with incremental pattern shifting.
//!
//! This crate holds everything that is pure computation:
//!
//! - [`autodiff`]: a small reverse-mode tensor engine with a closed op set and
//!   per-parameter freeze control, plus Adam and a finite-difference checker.
//! - [`model`]: a miniature SAM-style segmenter (ViT encoder, Fourier point
//!   prompt encoder, two-way attention mask decoder).
//! - [`pattern`]: the pattern-embedding module that turns a pooled image
//!   embedding into shift tokens added onto the decoder's mask tokens.
//! - [`apm`]: auto-prompting heads that predict point prompts from frozen
//!   encoder features.
//! - [`data`]: point prompts, ground-truth point sampling and the synthetic
//!   multi-domain corpus generator.
//! - [`train`]: losses, metrics and the adaptation/evaluation harness.
//!
//! The crate is `no_std` with `alloc` when built without the default `std`
//! feature. File formats, the CLI and the HTTP service live in the companion
//! `promise-seg` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod apm;
pub mod autodiff;
pub mod checks;
pub mod data;
mod error;
pub mod model;
pub mod pattern;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
