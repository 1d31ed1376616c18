//! Second-order importance scoring and pruning of atomic experts in
//! mixture-of-experts feed-forward layers, on a self-contained toy MoE
//! language model.

pub mod baselines;
pub mod error;
pub mod harness;
pub mod heapr;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
