//! Batch-free online normalization, reference normalizers, a tiny training
//! stack and the experiment harness built on top of them.

pub mod cli;
pub mod config;
pub mod data;
pub mod emulation;
pub mod error;
pub mod experiments;
pub mod net;
pub mod online;
pub mod param;
pub mod reference;
pub mod selftest;
pub mod tensor;

pub use cli::run_cli;
pub use error::{Error, Result};
pub use online::{OnlineNorm, OnlineNormConfig, OnlineNormState};
pub use tensor::{FeatureMap, Rng};
