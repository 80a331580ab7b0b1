//! Feature interaction search and gated retraining for factorization models.

// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod ingest;
pub mod interaction;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod par;
pub mod persistence;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
