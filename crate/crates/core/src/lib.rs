//! Continual test-time adaptation testbed.
//!
//! A small classifier is trained on a clean synthetic task, then adapted
//! online to a drifting stream of corrupted batches. Re-initialization
//! policies (none, fixed interval, random interval and adaptive
//! shrink-restore driven by label-flip fluctuations) decide when the adapted
//! weights are pulled back toward the source weights.

pub mod adapters;
pub mod asr;
pub mod error;
pub mod harness;
pub mod io;
pub mod matrix;
pub mod model;
pub mod policy;
pub mod seed;
pub mod stream;

pub use error::{Error, Result};
pub use matrix::Matrix;
