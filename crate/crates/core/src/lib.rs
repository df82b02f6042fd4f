//! Reliability adapters for failure detection under covariate and semantic
//! shift.
//!
//! A frozen MLP classifier is fine-tuned through low-rank branches, one per
//! failure source: a consistency objective for corrupted inputs and an
//! outlier-exposure objective for unknown classes. The resulting weight
//! deltas are merged or negated arithmetically and scored with the
//! failure-detection metrics in [`metrics`].

pub mod arithmetic;
pub mod autodiff;
pub mod checkpoint;
pub mod container;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod wildbench;

pub use error::{Error, LoadError, Result};
pub use tensor::Matrix;
