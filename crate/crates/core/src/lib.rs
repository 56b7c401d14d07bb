//! Relay-topology planning for energy-harvesting TDMA IoT networks.
//!
//! The crate samples network instances, balances TDMA slots for a given relay
//! topology, builds baseline topologies, and trains a small generator network
//! whose soft adjacency is scored by a differentiable packet-tracing rate
//! assessment.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod bench;
pub mod error;
pub mod generator;
pub mod ib;
pub mod model;
pub mod pt;

pub use error::{Error, Result};
