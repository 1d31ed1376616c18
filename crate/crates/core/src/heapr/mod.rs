//! Atomic-expert pruning driven by a shared per-expert gradient covariance.
//!
//! Stage 1 runs one forward and one backward pass per calibration batch and
//! accumulates, for each expert, the mean outer product of the loss gradient
//! with respect to that expert's output over the tokens routed to it.
//! Stage 2 runs one more forward pass and scores every atomic expert `k` of
//! expert `i` as the mean over routed tokens of `½ e_k(x)ᵀ Ḡ_i e_k(x)`.
//! Scores are then ranked (globally or per layer) and the lowest fraction is
//! physically removed.

mod covariance;
mod export;
mod importance;
mod pipeline;
mod prune;
mod rank;

use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

pub use covariance::{estimate_covariances, estimate_covariances_with};
pub use export::{config_hash, IMPORTANCE_CSV_HEADER};
pub use importance::{compute_importances, compute_importances_logged, compute_importances_with, ScoreLogEntry};
pub use pipeline::{heapr_pipeline, heapr_pipeline_with, PipelineConfig, PipelineOutput};
pub use prune::apply_prune;
pub(crate) use rank::{check_ratio, quota};
pub use rank::{rank_global, rank_global_with, rank_layerwise, rank_layerwise_with, RankOptions};

/// Tool version recorded in exported artifacts.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Address of one atomic expert. `channel` is the index in the unpruned
/// expert. Ordering is lexicographic over `(layer, expert, channel)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AtomicExpertKey {
    pub layer: usize,
    pub expert: usize,
    pub channel: usize,
}

impl AtomicExpertKey {
    pub fn new(layer: usize, expert: usize, channel: usize) -> Self {
        Self {
            layer,
            expert,
            channel,
        }
    }
}

impl fmt::Display for AtomicExpertKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}E{}C{}", self.layer, self.expert, self.channel)
    }
}

/// Mean gradient outer product `Ḡ_i` for one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCovariance {
    pub layer: usize,
    pub expert: usize,
    pub matrix: Matrix,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub key: AtomicExpertKey,
    pub score: f64,
    pub token_count: usize,
}

/// One score per atomic expert, sorted by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub method: String,
    /// Scores are not comparable across layers; global ranking refuses them.
    pub layerwise_only: bool,
    pub entries: Vec<ImportanceEntry>,
}

impl ImportanceTable {
    pub fn new(method: impl Into<String>, mut entries: Vec<ImportanceEntry>) -> Self {
        entries.sort_by_key(|e| e.key);
        Self {
            method: method.into(),
            layerwise_only: false,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &AtomicExpertKey) -> Option<&ImportanceEntry> {
        self.entries
            .binary_search_by_key(key, |e| e.key)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    /// Same keys with every score multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut t = self.clone();
        t.entries.iter_mut().for_each(|e| e.score *= factor);
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    Global,
    Layerwise,
}

impl fmt::Display for RankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankMode::Global => "global",
            RankMode::Layerwise => "layerwise",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredKey {
    pub key: AtomicExpertKey,
    pub score: f64,
}

/// Which atomic experts to remove.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneManifest {
    pub ratio: f64,
    pub mode: RankMode,
    pub method: String,
    pub channel_floor: usize,
    pub total_atomic_experts: usize,
    /// In pruning order (ascending score).
    pub pruned: Vec<ScoredKey>,
    /// Keys passed over because their expert was already at the floor.
    pub skipped: Vec<ScoredKey>,
    /// Channels left per `[layer][expert]` after pruning.
    pub remaining_channels: Vec<Vec<usize>>,
    pub tool_version: String,
    pub config_hash: Option<String>,
}

impl PruneManifest {
    pub fn pruned_keys(&self) -> Vec<AtomicExpertKey> {
        self.pruned.iter().map(|p| p.key).collect()
    }
}

/// Forward and backward traversals counted per calibration batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPasses {
    pub forward: u32,
    pub backward: u32,
}

#[derive(Debug)]
pub struct PassCounter {
    counts: Vec<(AtomicU32, AtomicU32)>,
}

impl PassCounter {
    pub fn new(batches: usize) -> Self {
        Self {
            counts: (0..batches).map(|_| (AtomicU32::new(0), AtomicU32::new(0))).collect(),
        }
    }

    pub(crate) fn forward(&self, batch: usize) {
        if let Some(c) = self.counts.get(batch) {
            c.0.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub(crate) fn backward(&self, batch: usize) {
        if let Some(c) = self.counts.get(batch) {
            c.1.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn report(&self) -> Vec<BatchPasses> {
        self.counts
            .iter()
            .map(|(f, b)| BatchPasses {
                forward: f.load(Ordering::Relaxed),
                backward: b.load(Ordering::Relaxed),
            })
            .collect()
    }
}

/// Splits sequences into consecutive batches of at most `batch_size`.
pub fn make_batches(seqs: &[Vec<u32>], batch_size: usize) -> Vec<Vec<Vec<u32>>> {
    seqs.chunks(batch_size.max(1)).map(<[Vec<u32>]>::to_vec).collect()
}
