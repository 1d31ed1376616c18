//! Experiment harness: synthetic corpora, perplexity, FLOPs accounting,
//! run configuration, ratio sweeps and method comparisons.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod flops;
pub mod sweep;

pub use config::*;
pub use corpus::*;
pub use eval::*;
pub use flops::*;
pub use sweep::*;
