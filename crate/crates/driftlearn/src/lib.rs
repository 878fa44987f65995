//! Online continual learning on a drifting, long-tailed synthetic stream.
//!
//! The crate trains a small bias-free MLP classifier on a single pass of a
//! non-stationary stream, combining deep-metric representation losses,
//! class-balanced focal classification with soft-label retrospection, and an
//! uncertainty-guided episodic replay memory with online and periodic
//! maintenance. An evaluation harness tracks mean class accuracy over time
//! and compares ablation variants against naive fine-tuning.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod nn;
pub mod seeding;
pub mod stream;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
