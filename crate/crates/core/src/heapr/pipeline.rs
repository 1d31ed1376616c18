use crate::error::Result;
use crate::model::MoEModel;
use crate::par::Execution;

use super::{
    apply_prune, compute_importances_with, estimate_covariances_with, rank_global_with, rank_layerwise_with,
    BatchPasses, GradCovariance, ImportanceTable, PassCounter, PruneManifest, RankMode, RankOptions,
};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub ratio: f64,
    pub mode: RankMode,
    pub rank: RankOptions,
    pub exec: Execution,
}

impl PipelineConfig {
    pub fn new(ratio: f64, mode: RankMode) -> Self {
        Self {
            ratio,
            mode,
            rank: RankOptions::default(),
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: MoEModel,
    pub table: ImportanceTable,
    pub manifest: PruneManifest,
    pub covariances: Vec<GradCovariance>,
    /// Traversals per calibration batch across both stages.
    pub passes: Vec<BatchPasses>,
    /// Stage-2 traversals when scoring ran on separate batches.
    pub stage2_passes: Option<Vec<BatchPasses>>,
}

/// Covariance estimation, scoring, ranking and pruning on one calibration
/// set.
pub fn heapr_pipeline(
    model: &MoEModel,
    calib: &[Vec<Vec<u32>>],
    ratio: f64,
    mode: RankMode,
) -> Result<PipelineOutput> {
    heapr_pipeline_with(model, calib, None, &PipelineConfig::new(ratio, mode))
}

/// As [`heapr_pipeline`]; `stage2` optionally supplies different batches for
/// the scoring pass.
pub fn heapr_pipeline_with(
    model: &MoEModel,
    calib: &[Vec<Vec<u32>>],
    stage2: Option<&[Vec<Vec<u32>>]>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    super::rank::check_ratio(cfg.ratio)?;
    let counter = PassCounter::new(calib.len());
    let covariances = estimate_covariances_with(model, calib, cfg.exec, &counter)?;
    let (table, stage2_passes) = match stage2 {
        None => (compute_importances_with(model, calib, &covariances, cfg.exec, &counter)?, None),
        Some(batches) => {
            let c2 = PassCounter::new(batches.len());
            let t = compute_importances_with(model, batches, &covariances, cfg.exec, &c2)?;
            (t, Some(c2.report()))
        }
    };
    let manifest = match cfg.mode {
        RankMode::Global => rank_global_with(&table, cfg.ratio, cfg.rank)?,
        RankMode::Layerwise => rank_layerwise_with(&table, cfg.ratio, cfg.rank)?,
    };
    let pruned = apply_prune(model, &manifest)?;
    Ok(PipelineOutput {
        model: pruned,
        table,
        manifest,
        covariances,
        passes: counter.report(),
        stage2_passes,
    })
}
