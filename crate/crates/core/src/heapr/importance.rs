use crate::error::{Error, Result};
use crate::linalg::quad_form;
use crate::model::{lm_forward_with, ForwardOptions, MoEModel};
use crate::par::{map_indexed, Execution};

use super::{AtomicExpertKey, GradCovariance, ImportanceEntry, ImportanceTable, PassCounter};

/// Records which covariance scored one atomic expert at one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreLogEntry {
    pub key: AtomicExpertKey,
    pub token: usize,
    /// Index into the covariance list.
    pub covariance: usize,
}

pub fn compute_importances(
    model: &MoEModel,
    calib: &[Vec<Vec<u32>>],
    covs: &[GradCovariance],
) -> Result<ImportanceTable> {
    compute_importances_with(model, calib, covs, Execution::default(), &PassCounter::new(calib.len()))
}

/// Like [`compute_importances`], also returning one log entry per quadratic
/// form evaluated.
pub fn compute_importances_logged(
    model: &MoEModel,
    calib: &[Vec<Vec<u32>>],
    covs: &[GradCovariance],
) -> Result<(ImportanceTable, Vec<ScoreLogEntry>)> {
    score(model, calib, covs, Execution::Sequential, &PassCounter::new(calib.len()), true)
}

/// Stage 2: one forward pass per batch.
pub fn compute_importances_with(
    model: &MoEModel,
    calib: &[Vec<Vec<u32>>],
    covs: &[GradCovariance],
    exec: Execution,
    counter: &PassCounter,
) -> Result<ImportanceTable> {
    score(model, calib, covs, exec, counter, false).map(|r| r.0)
}

fn covariance_index(model: &MoEModel, covs: &[GradCovariance]) -> Result<Vec<usize>> {
    let cfg = &model.config;
    let mut index = vec![usize::MAX; cfg.num_layers * cfg.num_experts];
    for (i, c) in covs.iter().enumerate() {
        if c.layer >= cfg.num_layers || c.expert >= cfg.num_experts {
            return Err(Error::Consistency(format!(
                "covariance for layer {} expert {} is outside the model",
                c.layer, c.expert
            )));
        }
        if c.matrix.shape() != (cfg.d_model, cfg.d_model) {
            return Err(Error::Consistency(format!(
                "covariance shape {:?} for d_model={}",
                c.matrix.shape(),
                cfg.d_model
            )));
        }
        index[c.layer * cfg.num_experts + c.expert] = i;
    }
    if index.contains(&usize::MAX) {
        return Err(Error::Consistency("covariances do not cover every expert".into()));
    }
    Ok(index)
}

type Partial = (Vec<Vec<f64>>, Vec<usize>, Vec<ScoreLogEntry>);

fn score(
    model: &MoEModel,
    calib: &[Vec<Vec<u32>>],
    covs: &[GradCovariance],
    exec: Execution,
    counter: &PassCounter,
    log: bool,
) -> Result<(ImportanceTable, Vec<ScoreLogEntry>)> {
    let cov_of = covariance_index(model, covs)?;
    let n_experts = model.config.num_experts;
    let slots = model.config.num_layers * n_experts;
    let widths: Vec<usize> = model.layers.iter().flat_map(|l| l.experts.iter().map(|e| e.channels())).collect();
    let mut offsets = vec![0usize; calib.len()];
    for b in 1..calib.len() {
        offsets[b] = offsets[b - 1] + calib[b - 1].iter().map(|s| s.len().saturating_sub(1)).sum::<usize>();
    }

    let partials = map_indexed(exec, calib.len(), |b| -> Result<Partial> {
        let opts = ForwardOptions {
            exec: Execution::Sequential,
            ..Default::default()
        };
        let (_, trace) = lm_forward_with(model, &calib[b], &opts)?;
        counter.forward(b);
        let mut sums: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; w]).collect();
        let mut counts = vec![0usize; slots];
        let mut entries = Vec::new();
        let mut e_k = vec![0.0; model.config.d_model];
        for (l, lt) in trace.layers.iter().enumerate() {
            for (t, tok) in lt.tokens.iter().enumerate() {
                for r in &tok.routes {
                    let slot = l * n_experts + r.expert;
                    let cov = &covs[cov_of[slot]];
                    let w = &model.layers[l].experts[r.expert];
                    counts[slot] += 1;
                    for j in 0..w.channels() {
                        let phi = r.phi[j];
                        for (m, e) in e_k.iter_mut().enumerate() {
                            *e = w.w_down.get(m, j) * phi;
                        }
                        sums[slot][j] += quad_form(&cov.matrix, &e_k)?;
                        if log {
                            entries.push(ScoreLogEntry {
                                key: AtomicExpertKey::new(l, r.expert, w.channel_ids[j]),
                                token: offsets[b] + t,
                                covariance: cov_of[slot],
                            });
                        }
                    }
                }
            }
        }
        Ok((sums, counts, entries))
    });

    let mut sums: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; w]).collect();
    let mut counts = vec![0usize; slots];
    let mut log_entries = Vec::new();
    for part in partials {
        let (s, c, e) = part?;
        for (dst, src) in sums.iter_mut().zip(s) {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
        counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        log_entries.extend(e);
    }

    let mut entries = Vec::with_capacity(model.num_atomic_experts());
    for (l, layer) in model.layers.iter().enumerate() {
        for (i, expert) in layer.experts.iter().enumerate() {
            let slot = l * n_experts + i;
            let n = counts[slot];
            for (j, &channel) in expert.channel_ids.iter().enumerate() {
                let score = if n == 0 { 0.0 } else { sums[slot][j] / n as f64 };
                entries.push(ImportanceEntry {
                    key: AtomicExpertKey::new(l, i, channel),
                    score,
                    token_count: n,
                });
            }
        }
    }
    Ok((ImportanceTable::new("heapr", entries), log_entries))
}
