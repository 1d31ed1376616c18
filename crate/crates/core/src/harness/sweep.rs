use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::heapr::{apply_prune, ImportanceTable, RankMode, RankOptions};
use crate::model::MoEModel;
use crate::par::Execution;

use super::config::{importance_table, prune_manifest, Method, RunConfig};
use super::eval::perplexity_with;
use super::flops::count_flops;

pub const SWEEP_CSV_HEADER: &str = "ratio,method,mode,seed,perplexity,flops_saving,param_fraction";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub method: String,
    pub mode: RankMode,
    pub seed: u64,
    pub perplexity: f64,
    /// MoE FLOPs saving per token.
    pub flops_saving: f64,
    /// Fraction of all model parameters removed.
    pub param_fraction: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:e},{:e},{:e}\n",
            r.ratio, r.method, r.mode, r.seed, r.perplexity, r.flops_saving, r.param_fraction
        ));
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub method: Method,
    pub mode: RankMode,
    pub seed: u64,
    pub rank: RankOptions,
    pub exec: Execution,
}

/// Prunes the model afresh from `table` at every ratio and evaluates it on
/// `eval`.
pub fn run_sweep(
    model: &MoEModel,
    table: &ImportanceTable,
    eval: &[Vec<u32>],
    ratios: &[f64],
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    let total = model.num_params() as f64;
    ratios
        .iter()
        .map(|&ratio| {
            let manifest = prune_manifest(opts.method, table, ratio, opts.mode, opts.rank)?;
            let pruned = apply_prune(model, &manifest)?;
            Ok(SweepRow {
                ratio,
                method: opts.method.name().to_string(),
                mode: manifest.mode,
                seed: opts.seed,
                perplexity: perplexity_with(&pruned, eval, opts.exec)?,
                flops_saving: count_flops(model, &pruned)?.saving_fraction,
                param_fraction: 1.0 - pruned.num_params() as f64 / total,
            })
        })
        .collect()
}

/// One sweep per method from the same calibration batches. Methods that
/// cannot rank globally fall back to layer-wise ranking.
pub fn compare_methods(
    cfg: &RunConfig,
    model: &MoEModel,
    calib: &[Vec<Vec<u32>>],
    eval: &[Vec<u32>],
    methods: &[Method],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let mut heapr_table: Option<ImportanceTable> = None;
    for &method in methods {
        let table = match (method, &heapr_table) {
            (Method::Heapr | Method::ExpertDrop, Some(t)) => t.clone(),
            _ => importance_table(cfg, method, model, calib)?,
        };
        if matches!(method, Method::Heapr | Method::ExpertDrop) {
            heapr_table.get_or_insert_with(|| table.clone());
        }
        let opts = SweepOptions {
            method,
            mode: method.effective_mode(cfg.run.mode),
            seed,
            rank: cfg.rank_options(),
            exec: cfg.exec(),
        };
        rows.extend(run_sweep(model, &table, eval, &cfg.run.ratios, &opts)?);
    }
    Ok(rows)
}

pub const CALIB_SIZE_CSV_HEADER: &str = "calib_sequences,ratio,method,mode,seed,perplexity";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibSizeRow {
    pub calib_sequences: usize,
    pub ratio: f64,
    pub method: String,
    pub mode: RankMode,
    pub seed: u64,
    pub perplexity: f64,
}

pub fn calib_size_csv(rows: &[CalibSizeRow]) -> String {
    let mut out = String::from(CALIB_SIZE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:e}\n",
            r.calib_sequences, r.ratio, r.method, r.mode, r.seed, r.perplexity
        ));
    }
    out
}

/// HEAPr calibrated on the first `n` calibration sequences for each `n` in
/// `cfg.run.calib_sizes`, pruned at `cfg.run.ratio` and evaluated on `eval`.
pub fn calib_size_study(
    cfg: &RunConfig,
    model: &MoEModel,
    calib_pool: &[Vec<u32>],
    eval: &[Vec<u32>],
    seed: u64,
) -> Result<Vec<CalibSizeRow>> {
    let mode = cfg.run.mode;
    cfg.run
        .calib_sizes
        .iter()
        .map(|&n| {
            let n = n.min(calib_pool.len());
            let batches = super::config::calib_batches(cfg, &calib_pool[..n])?;
            let table = importance_table(cfg, Method::Heapr, model, &batches)?;
            let manifest = prune_manifest(Method::Heapr, &table, cfg.run.ratio, mode, cfg.rank_options())?;
            let pruned = apply_prune(model, &manifest)?;
            Ok(CalibSizeRow {
                calib_sequences: n,
                ratio: cfg.run.ratio,
                method: Method::Heapr.name().into(),
                mode,
                seed,
                perplexity: perplexity_with(&pruned, eval, cfg.exec())?,
            })
        })
        .collect()
}
