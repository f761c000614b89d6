//! Deterministic simulator for federated meta-learning on small models.
//!
//! The crate trains a global initialization across simulated clients with
//! MAML-style episodes (exact second-order meta-gradients, first-order
//! approximation, or Meta-SGD with learned per-parameter rates) and provides
//! FedAvg and fine-tuned FedAvg baselines, plus the cost and fairness
//! accounting needed to compare them. Every run is a pure function of its
//! configuration: client sampling, data splits, initialization and minibatch
//! order all derive from one master seed.
//!
//! Start with [`runner::run`] for config-driven experiments or the `examples/`
//! directory for the library API.

pub mod config;
pub mod data;
pub mod diffcore;
mod error;
pub mod fedsim;
pub mod metalearn;
pub mod metrics;
pub mod models;
pub mod runner;
pub(crate) mod seed;

pub use error::{Error, Result};
