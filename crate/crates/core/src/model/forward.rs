use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::linalg::{axpy, log_softmax, silu_scalar, softmax, topk, Matrix, Vector};
use crate::par::{map_indexed, Execution};

use super::{ExpertWeights, GateMode, MoEConfig, MoELayer, MoEModel};

/// Multiply-add counter threaded through the forward pass. One multiply-add
/// counts as two FLOPs.
#[derive(Debug, Default)]
pub struct FlopCounter {
    moe: AtomicU64,
    head: AtomicU64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Router plus expert FLOPs.
    pub fn moe_flops(&self) -> u64 {
        self.moe.load(Ordering::Relaxed)
    }

    pub fn head_flops(&self) -> u64 {
        self.head.load(Ordering::Relaxed)
    }

    fn add_moe(&self, n: u64) {
        self.moe.fetch_add(n, Ordering::Relaxed);
    }

    fn add_head(&self, n: u64) {
        self.head.fetch_add(n, Ordering::Relaxed);
    }
}

/// Multiplies the gate of one routed expert at one token by `factor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateOverride {
    pub layer: usize,
    pub token: usize,
    pub expert: usize,
    pub factor: f64,
}

/// Adds `delta` to the output of one atomic expert (by channel position)
/// at one token.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputBump {
    pub layer: usize,
    pub token: usize,
    pub expert: usize,
    pub channel: usize,
    pub delta: Vec<f64>,
}

/// Expert selections per `[layer][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPlan {
    pub layers: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub exec: Execution,
    /// Reuse these expert selections instead of running top-κ. Gate values
    /// are still computed from the current router logits.
    pub routing: Option<&'a RoutingPlan>,
    pub gate_override: Option<GateOverride>,
    pub bump: Option<&'a OutputBump>,
    pub flops: Option<&'a FlopCounter>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteTrace {
    pub expert: usize,
    /// Gate value applied to the expert output (after any override).
    pub gate: f64,
    /// Override factor folded into `gate`; 1 unless overridden.
    pub gate_scale: f64,
    /// Pre-gate expert output `E_i(x)`.
    pub output: Vector,
    /// `SiLU(W_gate x) ⊙ (W_up x)`.
    pub phi: Vector,
    pub gate_pre: Vec<f64>,
    pub up_pre: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTrace {
    /// Layer input (residual stream).
    pub input: Vec<f64>,
    pub logits: Vec<f64>,
    pub routes: Vec<RouteTrace>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerTrace {
    pub tokens: Vec<TokenTrace>,
}

/// Everything the backward pass and the scorers need from one forward pass.
/// Tokens are flattened across the batch: sequence `s` owns the token range
/// `seq_offsets[s]..seq_offsets[s + 1]`, one token per predicted position.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub seq_offsets: Vec<usize>,
    pub layers: Vec<LayerTrace>,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub final_hidden: Vec<Vec<f64>>,
    pub token_nll: Vec<f64>,
}

impl ForwardTrace {
    pub fn num_tokens(&self) -> usize {
        self.token_nll.len()
    }

    pub fn mean_loss(&self) -> f64 {
        self.token_nll.iter().sum::<f64>() / self.token_nll.len() as f64
    }

    pub fn sequence_nll(&self, seq: usize) -> &[f64] {
        &self.token_nll[self.seq_offsets[seq]..self.seq_offsets[seq + 1]]
    }

    pub fn routing_plan(&self) -> RoutingPlan {
        RoutingPlan {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.tokens
                        .iter()
                        .map(|t| t.routes.iter().map(|r| r.expert).collect())
                        .collect()
                })
                .collect(),
        }
    }
}

pub(crate) struct ExpertEval {
    pub output: Vec<f64>,
    pub phi: Vec<f64>,
    pub gate_pre: Vec<f64>,
    pub up_pre: Vec<f64>,
}

pub(crate) fn eval_expert(
    w: &ExpertWeights,
    x: &[f64],
    bump: Option<(usize, &[f64])>,
    flops: Option<&FlopCounter>,
) -> ExpertEval {
    let gate_pre = w.w_gate.matvec(x);
    let up_pre = w.w_up.matvec(x);
    let phi: Vec<f64> = gate_pre
        .iter()
        .zip(&up_pre)
        .map(|(&a, &b)| silu_scalar(a) * b)
        .collect();
    let mut output = w.w_down.matvec(&phi);
    if let Some((_, delta)) = bump {
        axpy(1.0, delta, &mut output);
    }
    if let Some(f) = flops {
        let c = w.channels() as u64;
        let d = w.d_model() as u64;
        f.add_moe(3 * 2 * d * c + 2 * c);
    }
    ExpertEval {
        output,
        phi,
        gate_pre,
        up_pre,
    }
}

/// `y = W_down [SiLU(W_gate x) ⊙ (W_up x)]`, returned with the
/// intermediate activations `phi`.
pub fn expert_forward(w: &ExpertWeights, x: &Vector) -> Result<(Vector, Vector)> {
    if x.dim() != w.d_model() {
        return Err(dim_err(format!(
            "expert input of width {} for d_model={}",
            x.dim(),
            w.d_model()
        )));
    }
    let ev = eval_expert(w, x, None, None);
    Ok((ev.output.into(), ev.phi.into()))
}

/// Output of the atomic expert at channel position `j`.
pub fn atomic_expert_forward(w: &ExpertWeights, j: usize, x: &Vector) -> Result<Vector> {
    if j >= w.channels() {
        return Err(arg_err(format!(
            "channel {j} out of range for an expert with {} channels",
            w.channels()
        )));
    }
    if x.dim() != w.d_model() {
        return Err(dim_err("atomic expert input width"));
    }
    let a = crate::linalg::dot(w.w_gate.row(j), x);
    let b = crate::linalg::dot(w.w_up.row(j), x);
    let phi = silu_scalar(a) * b;
    Ok(w.w_down.col(j).into_iter().map(|v| v * phi).collect::<Vec<_>>().into())
}

/// Router logits with experts that have no channels left masked to `-inf`.
pub(crate) fn router_logits(layer: &MoELayer, x: &[f64], flops: Option<&FlopCounter>) -> Vec<f64> {
    let mut logits = layer.router.w_router.matvec(x);
    for (z, e) in logits.iter_mut().zip(&layer.experts) {
        if e.channels() == 0 {
            *z = f64::NEG_INFINITY;
        }
    }
    if let Some(f) = flops {
        let (e, d) = layer.router.w_router.shape();
        f.add_moe(2 * (e * d) as u64);
    }
    logits
}

/// Gate values for a set of selected experts.
pub(crate) fn gate_values(mode: GateMode, logits: &[f64], selected: &[usize]) -> Vec<f64> {
    match mode {
        GateMode::SoftmaxRenorm => {
            let z: Vec<f64> = selected.iter().map(|&i| logits[i]).collect();
            softmax(&z)
        }
        GateMode::Softmax => {
            let p = softmax(logits);
            selected.iter().map(|&i| p[i]).collect()
        }
        GateMode::RawLogits => selected.iter().map(|&i| logits[i]).collect(),
    }
}

pub(crate) fn select_experts(config: &MoEConfig, layer: &MoELayer, logits: &[f64]) -> Result<Vec<usize>> {
    let k = config.kappa.min(layer.live_experts());
    if k == 0 {
        return Ok(Vec::new());
    }
    Ok(topk(logits, k)?.into_iter().map(|(i, _)| i).collect())
}

struct TokenCtx<'o, 'a> {
    layer_idx: usize,
    token: usize,
    frozen: Option<&'o [usize]>,
    opts: &'o ForwardOptions<'a>,
}

fn layer_token(
    config: &MoEConfig,
    layer: &MoELayer,
    x: &[f64],
    ctx: &TokenCtx<'_, '_>,
) -> Result<(Vec<f64>, TokenTrace)> {
    let opts = ctx.opts;
    let logits = router_logits(layer, x, opts.flops);
    let selected = match ctx.frozen {
        Some(sel) => {
            if let Some(&bad) = sel.iter().find(|&&i| i >= layer.experts.len() || layer.experts[i].channels() == 0) {
                return Err(Error::Consistency(format!(
                    "frozen routing selects unavailable expert {bad}"
                )));
            }
            sel.to_vec()
        }
        None => select_experts(config, layer, &logits)?,
    };
    let gates = gate_values(config.gate_mode, &logits, &selected);
    let mut y = vec![0.0; x.len()];
    let mut routes = Vec::with_capacity(selected.len());
    for (&expert, &base_gate) in selected.iter().zip(&gates) {
        let scale = match opts.gate_override {
            Some(g) if g.layer == ctx.layer_idx && g.token == ctx.token && g.expert == expert => {
                g.factor
            }
            _ => 1.0,
        };
        let bump = opts.bump.and_then(|b| {
            (b.layer == ctx.layer_idx && b.token == ctx.token && b.expert == expert)
                .then_some((b.channel, b.delta.as_slice()))
        });
        let ev = eval_expert(&layer.experts[expert], x, bump, opts.flops);
        let gate = base_gate * scale;
        axpy(gate, &ev.output, &mut y);
        routes.push(RouteTrace {
            expert,
            gate,
            gate_scale: scale,
            output: ev.output.into(),
            phi: ev.phi.into(),
            gate_pre: ev.gate_pre,
            up_pre: ev.up_pre,
        });
    }
    Ok((
        y,
        TokenTrace {
            input: x.to_vec(),
            logits,
            routes,
        },
    ))
}

/// One MoE layer over a token matrix (rows are tokens). Returns the layer
/// output without the residual connection.
pub fn moe_layer_forward(
    config: &MoEConfig,
    layer: &MoELayer,
    x: &Matrix,
) -> Result<(Matrix, LayerTrace)> {
    if x.cols() != layer.router.w_router.cols() {
        return Err(dim_err(format!(
            "token width {} for d_model={}",
            x.cols(),
            layer.router.w_router.cols()
        )));
    }
    let opts = ForwardOptions::default();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut trace = LayerTrace::default();
    for t in 0..x.rows() {
        let ctx = TokenCtx {
            layer_idx: 0,
            token: t,
            frozen: None,
            opts: &opts,
        };
        let (y, tt) = layer_token(config, layer, x.row(t), &ctx)?;
        out.row_mut(t).copy_from_slice(&y);
        trace.tokens.push(tt);
    }
    Ok((out, trace))
}

struct SeqOut {
    layers: Vec<Vec<TokenTrace>>,
    final_hidden: Vec<Vec<f64>>,
    nll: Vec<f64>,
}

fn forward_sequence(
    model: &MoEModel,
    seq: &[u32],
    offset: usize,
    opts: &ForwardOptions<'_>,
) -> Result<SeqOut> {
    let n = seq.len() - 1;
    let mut layers: Vec<Vec<TokenTrace>> = (0..model.layers.len()).map(|_| Vec::with_capacity(n)).collect();
    let mut final_hidden = Vec::with_capacity(n);
    let mut nll = Vec::with_capacity(n);
    for pos in 0..n {
        let token = offset + pos;
        let mut h = model.token_embedding.row(seq[pos] as usize).to_vec();
        for (l, layer) in model.layers.iter().enumerate() {
            let frozen = match opts.routing {
                Some(plan) => Some(
                    plan.layers
                        .get(l)
                        .and_then(|t| t.get(token))
                        .ok_or_else(|| Error::Consistency("routing plan does not cover batch".into()))?
                        .as_slice(),
                ),
                None => None,
            };
            let ctx = TokenCtx {
                layer_idx: l,
                token,
                frozen,
                opts,
            };
            let (y, tt) = layer_token(&model.config, layer, &h, &ctx)?;
            axpy(1.0, &y, &mut h);
            layers[l].push(tt);
        }
        let logits = model.output_head.matvec(&h);
        if let Some(f) = opts.flops {
            let (v, d) = model.output_head.shape();
            f.add_head(2 * (v * d) as u64);
        }
        let lp = log_softmax(&logits);
        nll.push(-lp[seq[pos + 1] as usize]);
        final_hidden.push(h);
    }
    Ok(SeqOut {
        layers,
        final_hidden,
        nll,
    })
}

pub(crate) fn check_batch(model: &MoEModel, batch: &[Vec<u32>]) -> Result<Vec<usize>> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let v = model.config.vocab as u32;
    let mut offsets = Vec::with_capacity(batch.len() + 1);
    let mut total = 0;
    offsets.push(0);
    for (s, seq) in batch.iter().enumerate() {
        if seq.len() < 2 {
            return Err(Error::Data(format!("sequence {s} has fewer than 2 tokens")));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t >= v) {
            return Err(Error::Data(format!(
                "token id {bad} in sequence {s} exceeds vocab {v}"
            )));
        }
        total += seq.len() - 1;
        offsets.push(total);
    }
    Ok(offsets)
}

/// Mean next-token negative log-likelihood over every predicted position in
/// the batch, with the full trace.
pub fn lm_forward(model: &MoEModel, batch: &[Vec<u32>]) -> Result<(f64, ForwardTrace)> {
    lm_forward_with(model, batch, &ForwardOptions::default())
}

pub fn lm_forward_with(
    model: &MoEModel,
    batch: &[Vec<u32>],
    opts: &ForwardOptions<'_>,
) -> Result<(f64, ForwardTrace)> {
    let offsets = check_batch(model, batch)?;
    let parts = map_indexed(opts.exec, batch.len(), |s| {
        forward_sequence(model, &batch[s], offsets[s], opts)
    });
    let total = *offsets.last().unwrap();
    let mut trace = ForwardTrace {
        seq_offsets: offsets,
        layers: (0..model.layers.len()).map(|_| LayerTrace::default()).collect(),
        inputs: Vec::with_capacity(total),
        targets: Vec::with_capacity(total),
        final_hidden: Vec::with_capacity(total),
        token_nll: Vec::with_capacity(total),
    };
    for (seq, part) in batch.iter().zip(parts) {
        let part = part?;
        for (dst, src) in trace.layers.iter_mut().zip(part.layers) {
            dst.tokens.extend(src);
        }
        trace.final_hidden.extend(part.final_hidden);
        trace.token_nll.extend(part.nll);
        trace.inputs.extend_from_slice(&seq[..seq.len() - 1]);
        trace.targets.extend_from_slice(&seq[1..]);
    }
    let loss = trace.mean_loss();
    Ok((loss, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, MoEConfig};
    use crate::rng::SeededRng;

    fn tiny(seed: u64) -> MoEModel {
        init_model(&MoEConfig {
            d_model: 4,
            d_inter: 3,
            num_experts: 4,
            kappa: 2,
            num_layers: 1,
            vocab: 8,
            seq_len: 6,
            seed,
            ..MoEConfig::default()
        })
        .unwrap()
    }

    fn random_vec(rng: &mut SeededRng, n: usize) -> Vector {
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>().into()
    }

    #[test]
    fn zero_input_and_zero_down_give_zero_output() {
        let m = tiny(0);
        let e = &m.layers[0].experts[0];
        let (y, _) = expert_forward(e, &Vector::zeros(4)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));

        let mut rng = SeededRng::new(1);
        let x = random_vec(&mut rng, 4);
        let (_, phi_before) = expert_forward(e, &x).unwrap();
        let mut e2 = e.clone();
        e2.w_down = Matrix::zeros(4, 3);
        let (y, phi) = expert_forward(&e2, &x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert_eq!(phi, phi_before);
        assert!(expert_forward(e, &Vector::zeros(3)).is_err());
    }

    #[test]
    fn atomic_experts_sum_to_expert() {
        let m = tiny(2);
        let mut rng = SeededRng::new(4);
        for e in &m.layers[0].experts {
            for _ in 0..10 {
                let x = random_vec(&mut rng, 4);
                let (y, _) = expert_forward(e, &x).unwrap();
                let mut sum = vec![0.0; 4];
                for j in 0..3 {
                    axpy(1.0, &atomic_expert_forward(e, j, &x).unwrap(), &mut sum);
                }
                for (a, b) in y.iter().zip(&sum) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
        assert!(atomic_expert_forward(&m.layers[0].experts[0], 3, &Vector::zeros(4)).is_err());
    }

    #[test]
    fn zero_down_column_kills_atomic_expert() {
        let mut m = tiny(3);
        let e = &mut m.layers[0].experts[1];
        for i in 0..4 {
            e.w_down.set(i, 2, 0.0);
        }
        let x: Vector = vec![0.3, -0.2, 0.9, 0.1].into();
        assert!(atomic_expert_forward(e, 2, &x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_channel_expert_is_its_atomic_expert() {
        let cfg = MoEConfig {
            d_model: 4,
            d_inter: 1,
            num_experts: 2,
            kappa: 1,
            num_layers: 1,
            vocab: 8,
            ..MoEConfig::default()
        };
        let m = init_model(&cfg).unwrap();
        let x: Vector = vec![0.5, -0.1, 0.2, 0.7].into();
        let e = &m.layers[0].experts[0];
        assert_eq!(expert_forward(e, &x).unwrap().0, atomic_expert_forward(e, 0, &x).unwrap());
    }

    /// Independent evaluation: full softmax, explicit sort, renormalize.
    fn reference_layer(layer: &MoELayer, kappa: usize, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = (0..layer.experts.len())
            .map(|i| (0..x.len()).map(|k| layer.router.w_router.get(i, k) * x[k]).sum())
            .collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let ex: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = ex.iter().sum();
        let p: Vec<f64> = ex.iter().map(|v| v / s).collect();
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
        let sel = &order[..kappa];
        let norm: f64 = sel.iter().map(|&i| p[i]).sum();
        let mut y = vec![0.0; x.len()];
        for &i in sel {
            let e = &layer.experts[i];
            for j in 0..e.channels() {
                let a: f64 = (0..x.len()).map(|k| e.w_gate.get(j, k) * x[k]).sum();
                let b: f64 = (0..x.len()).map(|k| e.w_up.get(j, k) * x[k]).sum();
                let phi = a / (1.0 + (-a).exp()) * b;
                for r in 0..x.len() {
                    y[r] += p[i] / norm * e.w_down.get(r, j) * phi;
                }
            }
        }
        y
    }

    #[test]
    fn layer_matches_independent_evaluator() {
        let m = tiny(5);
        let mut rng = SeededRng::new(6);
        let x = Matrix::from_fn(12, 4, |_, _| rng.uniform(-1.0, 1.0));
        let (y, trace) = moe_layer_forward(&m.config, &m.layers[0], &x).unwrap();
        for t in 0..12 {
            let want = reference_layer(&m.layers[0], 2, x.row(t));
            for (a, b) in y.row(t).iter().zip(&want) {
                assert!((a - b).abs() < 1e-10);
            }
            let tt = &trace.tokens[t];
            assert_eq!(tt.routes.len(), 2);
            let gsum: f64 = tt.routes.iter().map(|r| r.gate).sum();
            assert!((gsum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn full_routing_and_single_routing() {
        let mut m = tiny(8);
        m.config.kappa = 4;
        let x = Matrix::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let (_, trace) = moe_layer_forward(&m.config, &m.layers[0], &x).unwrap();
        for (t, tt) in trace.tokens.iter().enumerate() {
            let p = softmax(&m.layers[0].router.w_router.matvec(x.row(t)));
            for r in &tt.routes {
                assert!((r.gate - p[r.expert]).abs() < 1e-12);
            }
        }
        m.config.kappa = 1;
        let (y, trace) = moe_layer_forward(&m.config, &m.layers[0], &x).unwrap();
        for t in 0..3 {
            let r = &trace.tokens[t].routes[0];
            assert_eq!(r.gate, 1.0);
            assert_eq!(y.row(t), &r.output[..]);
        }
    }

    #[test]
    fn untrained_loss_near_log_vocab() {
        let cfg = MoEConfig::default();
        let m = init_model(&cfg).unwrap();
        let mut rng = SeededRng::new(99);
        let batch: Vec<Vec<u32>> = (0..8)
            .map(|_| (0..64).map(|_| rng.below(64) as u32).collect())
            .collect();
        let (loss, trace) = lm_forward(&m, &batch).unwrap();
        let ln_v = (64f64).ln();
        assert!((loss - ln_v).abs() / ln_v < 0.15, "loss={loss}");
        assert_eq!(trace.num_tokens(), 8 * 63);

        let mut rev = batch.clone();
        rev.reverse();
        let (loss_rev, _) = lm_forward(&m, &rev).unwrap();
        assert!((loss - loss_rev).abs() < 1e-12);
    }

    #[test]
    fn rigged_head_predicts_perfectly() {
        let mut m = tiny(0);
        // Head row for token 5 aligned with the hidden state, scaled large.
        let (_, trace) = lm_forward(&m, &[vec![2, 5]]).unwrap();
        let h = trace.final_hidden[0].clone();
        m.output_head = Matrix::zeros(8, 4);
        for (k, v) in h.iter().enumerate() {
            m.output_head.set(5, k, v * 1e4);
        }
        let (loss, _) = lm_forward(&m, &[vec![2, 5]]).unwrap();
        assert!(loss < 1e-9, "loss={loss}");
    }

    #[test]
    fn bad_tokens_are_rejected() {
        let m = tiny(0);
        assert!(matches!(lm_forward(&m, &[vec![1, 8]]), Err(Error::Data(_))));
        assert!(matches!(lm_forward(&m, &[vec![1]]), Err(Error::Data(_))));
        assert!(matches!(lm_forward(&m, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn frozen_routing_reproduces_forward() {
        let m = tiny(4);
        let batch = vec![vec![1, 2, 3, 4, 5], vec![7, 6, 5, 0]];
        let (loss, trace) = lm_forward(&m, &batch).unwrap();
        let plan = trace.routing_plan();
        let opts = ForwardOptions {
            routing: Some(&plan),
            ..Default::default()
        };
        let (loss2, trace2) = lm_forward_with(&m, &batch, &opts).unwrap();
        assert_eq!(loss, loss2);
        assert_eq!(trace, trace2);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let m = init_model(&MoEConfig::default()).unwrap();
        let mut rng = SeededRng::new(3);
        let batch: Vec<Vec<u32>> = (0..6)
            .map(|_| (0..20).map(|_| rng.below(64) as u32).collect())
            .collect();
        let seq = lm_forward_with(&m, &batch, &ForwardOptions { exec: Execution::Sequential, ..Default::default() }).unwrap();
        let par = lm_forward_with(&m, &batch, &ForwardOptions { exec: Execution::Parallel, ..Default::default() }).unwrap();
        assert_eq!(seq.0.to_bits(), par.0.to_bits());
        assert_eq!(seq.1, par.1);
    }
}
