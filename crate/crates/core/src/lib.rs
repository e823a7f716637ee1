//! Self-ensemble and self-distillation fine-tuning for a small transformer
//! text classifier, with the tape-based autodiff, optimizer, data pipeline
//! and experiment harness it runs on.

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
