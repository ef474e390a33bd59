//! Deterministic federated-learning simulator.
//!
//! The server side of the pipeline works without client data: uploaded models
//! are averaged, inputs are synthesized so that their batch statistics match the
//! averaged model's BatchNorm running statistics, every upload is probed with
//! those inputs, and clients whose softmax responses agree (low KL divergence)
//! are aggregated together.
//!
//! Module map:
//!
//! * [`tensor`] and [`nn`]: dense tensors and the MLP-BN network family with
//!   hand-derived gradients.
//! * [`scenario`], [`attack`], [`dp`]: synthetic non-iid data, poisoning
//!   attacks and the Gaussian mechanism.
//! * [`extraction`]: pre-aggregation, channel selection, input synthesis.
//! * [`clustering`]: response vectors, KL similarity matrix, threshold
//!   partitioning.
//! * [`orchestrator`]: multi-round federated runs under a chosen strategy.
//! * [`metrics`] and [`report`]: evaluation and serialization.

pub mod attack;
pub mod clustering;
pub mod config;
pub mod dp;
mod error;
pub mod extraction;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
