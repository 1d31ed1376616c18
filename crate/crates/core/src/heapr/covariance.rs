use crate::error::{arg_err, Result};
use crate::linalg::{outer_accumulate_in_place, Matrix};
use crate::model::{lm_backward_with, lm_forward_with, ForwardOptions, MoEModel};
use crate::par::{map_indexed, Execution};

use super::{GradCovariance, PassCounter};

/// Per-expert gradient covariances over a list of calibration batches.
pub fn estimate_covariances(model: &MoEModel, calib: &[Vec<Vec<u32>>]) -> Result<Vec<GradCovariance>> {
    estimate_covariances_with(model, calib, Execution::default(), &PassCounter::new(calib.len()))
}

/// Stage 1. Each batch gets exactly one forward and one backward pass.
///
/// The backward pass differentiates the batch-mean loss, so each captured
/// gradient carries a `1/n_batch` factor; it is multiplied back out here so
/// `Ḡ_i` is the covariance of per-token (sample-wise) loss gradients.
pub fn estimate_covariances_with(
    model: &MoEModel,
    calib: &[Vec<Vec<u32>>],
    exec: Execution,
    counter: &PassCounter,
) -> Result<Vec<GradCovariance>> {
    if calib.is_empty() || calib.iter().all(Vec::is_empty) {
        return Err(arg_err("empty calibration set"));
    }
    let cfg = &model.config;
    let (n_layers, n_experts, d) = (cfg.num_layers, cfg.num_experts, cfg.d_model);

    let partials = map_indexed(exec, calib.len(), |b| -> Result<Vec<(Matrix, usize)>> {
        let batch = &calib[b];
        let opts = ForwardOptions {
            exec: Execution::Sequential,
            ..Default::default()
        };
        let (_, trace) = lm_forward_with(model, batch, &opts)?;
        counter.forward(b);
        let (captured, _) = lm_backward_with(model, batch, &trace, Execution::Sequential)?;
        counter.backward(b);
        let scale = trace.num_tokens() as f64;
        let mut acc: Vec<(Matrix, usize)> = (0..n_layers * n_experts).map(|_| (Matrix::zeros(d, d), 0)).collect();
        let mut g = vec![0.0; d];
        for (l, tokens) in captured.layers.iter().enumerate() {
            for routes in tokens {
                for r in routes {
                    g.iter_mut().zip(r.grad.iter()).for_each(|(a, b)| *a = b * scale);
                    let slot = &mut acc[l * n_experts + r.expert];
                    outer_accumulate_in_place(&mut slot.0, &g)?;
                    slot.1 += 1;
                }
            }
        }
        Ok(acc)
    });

    let mut sums: Vec<(Matrix, usize)> = (0..n_layers * n_experts).map(|_| (Matrix::zeros(d, d), 0)).collect();
    for part in partials {
        for (dst, src) in sums.iter_mut().zip(part?) {
            dst.0.add_assign(&src.0)?;
            dst.1 += src.1;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(idx, (mut matrix, count))| {
            if count > 0 {
                matrix.scale(1.0 / count as f64);
            }
            GradCovariance {
                layer: idx / n_experts,
                expert: idx % n_experts,
                matrix,
                token_count: count,
            }
        })
        .collect())
}
