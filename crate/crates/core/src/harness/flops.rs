use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{lm_forward_with, FlopCounter, ForwardOptions, ForwardTrace, MoEModel};
use crate::par::Execution;

pub const FLOPS_CONVENTION: &str = "multiply-add = 2 FLOPs; per token and layer: router 2*E*d, \
each routed expert 3*(2*d*c)+2*c for c remaining channels; output head 2*V*d per token, \
counted separately; embedding lookup 0";

/// One expert evaluation on one token.
pub fn expert_flops(d_model: usize, channels: usize) -> u64 {
    let (d, c) = (d_model as u64, channels as u64);
    3 * 2 * d * c + 2 * c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub convention: String,
    pub router_per_token: f64,
    /// Router plus routed experts, summed over layers.
    pub moe_per_token_original: f64,
    pub moe_per_token_pruned: f64,
    pub head_per_token: f64,
    pub total_per_token_original: f64,
    pub total_per_token_pruned: f64,
    /// `1 − pruned/original` on the MoE FLOPs.
    pub saving_fraction: f64,
    pub total_saving_fraction: f64,
}

/// Expected per-token MoE FLOPs: each layer routes `min(κ, live)` experts,
/// costed at the mean over experts that still have channels.
pub fn moe_flops_per_token(model: &MoEModel) -> f64 {
    let d = model.config.d_model;
    model
        .layers
        .iter()
        .map(|layer| {
            let router = 2.0 * (layer.experts.len() * d) as f64;
            let live: Vec<u64> = layer
                .experts
                .iter()
                .filter(|e| e.channels() > 0)
                .map(|e| expert_flops(d, e.channels()))
                .collect();
            if live.is_empty() {
                return router;
            }
            let k = model.config.kappa.min(live.len()) as f64;
            router + k * live.iter().sum::<u64>() as f64 / live.len() as f64
        })
        .sum()
}

fn head_flops_per_token(model: &MoEModel) -> u64 {
    let (v, d) = model.output_head.shape();
    2 * (v * d) as u64
}

pub fn count_flops(original: &MoEModel, pruned: &MoEModel) -> Result<FlopsReport> {
    if original.config != pruned.config {
        return Err(Error::Consistency("FLOPs comparison across different architectures".into()));
    }
    let router: u64 = original
        .layers
        .iter()
        .map(|l| 2 * (l.experts.len() * original.config.d_model) as u64)
        .sum();
    let head = head_flops_per_token(original) as f64;
    let moe_o = moe_flops_per_token(original);
    let moe_p = moe_flops_per_token(pruned);
    let saving = |o: f64, p: f64| if o > 0.0 { (1.0 - p / o).max(0.0) } else { 0.0 };
    Ok(FlopsReport {
        convention: FLOPS_CONVENTION.to_string(),
        router_per_token: router as f64,
        moe_per_token_original: moe_o,
        moe_per_token_pruned: moe_p,
        head_per_token: head,
        total_per_token_original: moe_o + head,
        total_per_token_pruned: moe_p + head,
        saving_fraction: saving(moe_o, moe_p),
        total_saving_fraction: saving(moe_o + head, moe_p + head),
    })
}

/// Exact FLOPs of a traced forward pass, from the routes it took:
/// `(moe, head)`.
pub fn traced_flops(model: &MoEModel, trace: &ForwardTrace) -> (u64, u64) {
    let d = model.config.d_model;
    let mut moe = 0u64;
    for (layer, lt) in model.layers.iter().zip(&trace.layers) {
        let router = 2 * (layer.experts.len() * d) as u64;
        for t in &lt.tokens {
            moe += router;
            moe += t
                .routes
                .iter()
                .map(|r| expert_flops(d, layer.experts[r.expert].channels()))
                .sum::<u64>();
        }
    }
    (moe, head_flops_per_token(model) * trace.num_tokens() as u64)
}

/// Like [`count_flops`] with per-token MoE FLOPs measured on `batch`: each
/// model is run and charged for the experts its tokens were routed to.
pub fn count_flops_routed(original: &MoEModel, pruned: &MoEModel, batch: &[Vec<u32>]) -> Result<FlopsReport> {
    let mut report = count_flops(original, pruned)?;
    let measure = |m: &MoEModel| -> Result<f64> {
        let opts = ForwardOptions {
            exec: Execution::Sequential,
            ..Default::default()
        };
        let (_, trace) = lm_forward_with(m, batch, &opts)?;
        Ok(traced_flops(m, &trace).0 as f64 / trace.num_tokens() as f64)
    };
    let (o, p) = (measure(original)?, measure(pruned)?);
    report.moe_per_token_original = o;
    report.moe_per_token_pruned = p;
    report.total_per_token_original = o + report.head_per_token;
    report.total_per_token_pruned = p + report.head_per_token;
    report.saving_fraction = if o > 0.0 { (1.0 - p / o).max(0.0) } else { 0.0 };
    report.total_saving_fraction = (1.0 - report.total_per_token_pruned / report.total_per_token_original).max(0.0);
    Ok(report)
}

/// Runs `batch` through the model with an instrumented counter and returns
/// `(counted, traced)` FLOPs as `(moe, head)` pairs.
pub fn instrumented_flops(model: &MoEModel, batch: &[Vec<u32>]) -> Result<((u64, u64), (u64, u64))> {
    let counter = FlopCounter::new();
    let opts = ForwardOptions {
        flops: Some(&counter),
        ..Default::default()
    };
    let (_, trace) = lm_forward_with(model, batch, &opts)?;
    Ok(((counter.moe_flops(), counter.head_flops()), traced_flops(model, &trace)))
}
