use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, silu_grad_scalar, silu_scalar, softmax, Matrix, Vector};
use crate::par::{map_indexed, Execution};

use super::forward::{check_batch, gate_values, ForwardTrace};
use super::{GateMode, MoEModel};

/// Gradient of the loss with respect to one routed expert's pre-gate output.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedGrad {
    pub expert: usize,
    pub grad: Vector,
}

/// `∂ℓ/∂E_i(x)` for every routed `(token, expert)` pair, laid out
/// `[layer][token][route]` in the same order as the forward trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutputGrads {
    pub layers: Vec<Vec<Vec<RoutedGrad>>>,
}

impl ExpertOutputGrads {
    pub fn get(&self, layer: usize, token: usize, expert: usize) -> Option<&Vector> {
        self.layers
            .get(layer)?
            .get(token)?
            .iter()
            .find(|r| r.expert == expert)
            .map(|r| &r.grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrads {
    pub w_up: Matrix,
    pub w_gate: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub router: Matrix,
    pub experts: Vec<ExpertGrads>,
}

/// Parameter gradients with the same layout as [`MoEModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub token_embedding: Matrix,
    pub layers: Vec<LayerGrads>,
    pub output_head: Matrix,
}

impl ModelGrads {
    pub fn zeros_like(model: &MoEModel) -> Self {
        let zeros = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            token_embedding: zeros(&model.token_embedding),
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    router: zeros(&l.router.w_router),
                    experts: l
                        .experts
                        .iter()
                        .map(|e| ExpertGrads {
                            w_up: zeros(&e.w_up),
                            w_gate: zeros(&e.w_gate),
                            w_down: zeros(&e.w_down),
                        })
                        .collect(),
                })
                .collect(),
            output_head: zeros(&model.output_head),
        }
    }

    /// Same order as [`MoEModel::param_slices`].
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.token_embedding.data()];
        for layer in &self.layers {
            out.push(layer.router.data());
            for e in &layer.experts {
                out.push(e.w_up.data());
                out.push(e.w_gate.data());
                out.push(e.w_down.data());
            }
        }
        out.push(self.output_head.data());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.token_embedding.data_mut()];
        for layer in &mut self.layers {
            out.push(layer.router.data_mut());
            for e in &mut layer.experts {
                out.push(e.w_up.data_mut());
                out.push(e.w_gate.data_mut());
                out.push(e.w_down.data_mut());
            }
        }
        out.push(self.output_head.data_mut());
        out
    }

    fn add(&mut self, other: &ModelGrads) {
        for (a, b) in self.param_slices_mut().into_iter().zip(other.param_slices()) {
            axpy(1.0, b, a);
        }
    }

    pub fn norm(&self) -> f64 {
        self.param_slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Sequences per accumulation chunk. Fixed so the summation order does not
/// depend on the execution mode.
const CHUNK: usize = 8;

/// Reverse-mode gradients of the mean batch loss. The captured expert-output
/// gradients include the gate factor: `∂ℓ/∂E_i = g_i(x) · ∂ℓ/∂y`.
pub fn lm_backward(
    model: &MoEModel,
    batch: &[Vec<u32>],
    trace: &ForwardTrace,
) -> Result<(ExpertOutputGrads, ModelGrads)> {
    lm_backward_with(model, batch, trace, Execution::default())
}

pub fn lm_backward_with(
    model: &MoEModel,
    batch: &[Vec<u32>],
    trace: &ForwardTrace,
    exec: Execution,
) -> Result<(ExpertOutputGrads, ModelGrads)> {
    let offsets = check_batch(model, batch)?;
    if offsets != trace.seq_offsets
        || trace.layers.len() != model.layers.len()
        || trace.layers.iter().any(|l| l.tokens.len() != trace.num_tokens())
    {
        return Err(Error::Consistency("trace was not produced on this batch".into()));
    }
    let matches_batch = batch.iter().enumerate().all(|(s, seq)| {
        let r = offsets[s]..offsets[s + 1];
        trace.inputs[r.clone()] == seq[..seq.len() - 1] && trace.targets[r] == seq[1..]
    });
    if !matches_batch {
        return Err(Error::Consistency("trace tokens differ from batch".into()));
    }

    let n_tokens = trace.num_tokens() as f64;
    let n_chunks = batch.len().div_ceil(CHUNK);
    let parts = map_indexed(exec, n_chunks, |c| {
        let mut grads = ModelGrads::zeros_like(model);
        let lo = offsets[c * CHUNK];
        let hi = offsets[((c + 1) * CHUNK).min(batch.len())];
        let captured: Vec<Vec<Vec<RoutedGrad>>> = (lo..hi)
            .map(|t| backward_token(model, trace, t, n_tokens, &mut grads))
            .collect();
        (grads, captured)
    });

    let mut total = ModelGrads::zeros_like(model);
    let mut layers: Vec<Vec<Vec<RoutedGrad>>> = (0..model.layers.len())
        .map(|_| Vec::with_capacity(trace.num_tokens()))
        .collect();
    for (grads, captured) in parts {
        total.add(&grads);
        for per_layer in captured {
            for (l, routes) in per_layer.into_iter().enumerate() {
                layers[l].push(routes);
            }
        }
    }
    Ok((ExpertOutputGrads { layers }, total))
}

/// Backpropagates one token's loss, accumulating into `grads`. Returns the
/// captured expert-output gradients indexed `[layer][route]`.
fn backward_token(
    model: &MoEModel,
    trace: &ForwardTrace,
    t: usize,
    n_tokens: f64,
    grads: &mut ModelGrads,
) -> Vec<Vec<RoutedGrad>> {
    let h_final = &trace.final_hidden[t];
    let mut dlogits = softmax(&model.output_head.matvec(h_final));
    dlogits[trace.targets[t] as usize] -= 1.0;
    dlogits.iter_mut().for_each(|v| *v /= n_tokens);
    grads.output_head.add_outer(1.0, &dlogits, h_final);
    let mut dh = model.output_head.matvec_t(&dlogits);

    let mode = model.config.gate_mode;
    let mut captured: Vec<Vec<RoutedGrad>> = vec![Vec::new(); model.layers.len()];
    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let lg = &mut grads.layers[l];
        let tt = &trace.layers[l].tokens[t];
        let x = &tt.input;
        let dy = dh.clone();
        let mut dgate = Vec::with_capacity(tt.routes.len());
        for r in &tt.routes {
            let g_e: Vec<f64> = dy.iter().map(|v| r.gate * v).collect();
            dgate.push(dot(&dy, &r.output) * r.gate_scale);

            let w = &layer.experts[r.expert];
            let eg = &mut lg.experts[r.expert];
            eg.w_down.add_outer(1.0, &g_e, &r.phi);
            let dphi = w.w_down.matvec_t(&g_e);
            let mut da = vec![0.0; dphi.len()];
            let mut db = vec![0.0; dphi.len()];
            for j in 0..dphi.len() {
                let a = r.gate_pre[j];
                da[j] = dphi[j] * r.up_pre[j] * silu_grad_scalar(a);
                db[j] = dphi[j] * silu_scalar(a);
            }
            eg.w_gate.add_outer(1.0, &da, x);
            eg.w_up.add_outer(1.0, &db, x);
            axpy(1.0, &w.w_gate.matvec_t(&da), &mut dh);
            axpy(1.0, &w.w_up.matvec_t(&db), &mut dh);

            captured[l].push(RoutedGrad {
                expert: r.expert,
                grad: g_e.into(),
            });
        }

        let selected: Vec<usize> = tt.routes.iter().map(|r| r.expert).collect();
        let dz = router_logit_grad(mode, &tt.logits, &selected, &dgate);
        lg.router.add_outer(1.0, &dz, x);
        axpy(1.0, &layer.router.w_router.matvec_t(&dz), &mut dh);
    }
    grads.token_embedding.row_mut(trace.inputs[t] as usize).iter_mut().zip(&dh).for_each(|(g, d)| *g += d);
    captured
}

/// Pulls gradients on the (unscaled) gate values back to router logits.
fn router_logit_grad(mode: GateMode, logits: &[f64], selected: &[usize], dgate: &[f64]) -> Vec<f64> {
    let mut dz = vec![0.0; logits.len()];
    if selected.is_empty() {
        return dz;
    }
    match mode {
        GateMode::SoftmaxRenorm => {
            let g = gate_values(mode, logits, selected);
            let inner: f64 = g.iter().zip(dgate).map(|(a, b)| a * b).sum();
            for (k, &i) in selected.iter().enumerate() {
                dz[i] = g[k] * (dgate[k] - inner);
            }
        }
        GateMode::Softmax => {
            let p = softmax(logits);
            let mut dp = vec![0.0; logits.len()];
            for (k, &i) in selected.iter().enumerate() {
                dp[i] = dgate[k];
            }
            let inner = dot(&p, &dp);
            for i in 0..logits.len() {
                dz[i] = p[i] * (dp[i] - inner);
            }
        }
        GateMode::RawLogits => {
            for (k, &i) in selected.iter().enumerate() {
                dz[i] = dgate[k];
            }
        }
    }
    dz
}
