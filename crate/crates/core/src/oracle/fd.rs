use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::heapr::AtomicExpertKey;
use crate::model::{
    lm_backward, lm_forward, lm_forward_with, ExpertWeights, ForwardOptions, GateOverride, MoEModel, OutputBump,
};
use crate::rng::SeededRng;

use super::FDConfig;

/// The three parameter groups of an atomic expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Up,
    Gate,
    Down,
}

const GROUPS: [ParamGroup; 3] = [ParamGroup::Up, ParamGroup::Gate, ParamGroup::Down];

#[derive(Debug, Clone, Copy)]
struct Coord {
    expert: usize,
    pos: usize,
    group: ParamGroup,
    idx: usize,
}

fn nudge(w: &mut ExpertWeights, c: Coord, by: f64) {
    match c.group {
        ParamGroup::Up => w.w_up.row_mut(c.pos)[c.idx] += by,
        ParamGroup::Gate => w.w_gate.row_mut(c.pos)[c.idx] += by,
        ParamGroup::Down => {
            let v = w.w_down.get(c.idx, c.pos);
            w.w_down.set(c.idx, c.pos, v + by);
        }
    }
}

/// Sum of the (ungated) outputs of `experts`.
fn summed_output(experts: &[(usize, ExpertWeights)], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (_, w) in experts {
        let ev = crate::model::forward::eval_expert(w, x, None, None);
        y.iter_mut().zip(&ev.output).for_each(|(a, b)| *a += b);
    }
    y
}

fn locate(model: &MoEModel, key: AtomicExpertKey) -> Result<usize> {
    let c = &model.config;
    if key.layer >= c.num_layers || key.expert >= c.num_experts {
        return Err(arg_err(format!("key {key} outside the model")));
    }
    model.layers[key.layer].experts[key.expert]
        .position_of(key.channel)
        .ok_or_else(|| arg_err(format!("key {key} not present in the model")))
}

/// Mixed central differences `∂²y/∂θ_a∂θ_b` of the summed output of the
/// experts owning `a` and `b`, one value (max over output components) per
/// sampled coordinate pair. `θ_a` ranges over the `3·d_model` parameters of
/// atomic expert `a`, likewise `θ_b`.
///
/// When `a == b` pairs are drawn from different groups, since the
/// up/up and down/down blocks vanish identically.
pub fn fd_mixed_partials(
    model: &MoEModel,
    x: &[f64],
    a: AtomicExpertKey,
    b: AtomicExpertKey,
    pairs: usize,
    cfg: &FDConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if a.layer != b.layer {
        return Err(arg_err("keys must share a layer"));
    }
    let d = model.config.d_model;
    if x.len() != d {
        return Err(crate::error::dim_err("input width"));
    }
    let (pa, pb) = (locate(model, a)?, locate(model, b)?);
    let layer = &model.layers[a.layer];
    let mut experts = vec![(a.expert, layer.experts[a.expert].clone())];
    if b.expert != a.expert {
        experts.push((b.expert, layer.experts[b.expert].clone()));
    }
    let slot = |e: usize| experts.iter().position(|(i, _)| *i == e).unwrap();
    let (sa, sb) = (slot(a.expert), slot(b.expert));
    let h = cfg.h;

    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let ga = GROUPS[rng.below(3)];
        let gb = if a == b {
            let others: Vec<ParamGroup> = GROUPS.iter().copied().filter(|&g| g != ga).collect();
            others[rng.below(2)]
        } else {
            GROUPS[rng.below(3)]
        };
        let ca = Coord {
            expert: sa,
            pos: pa,
            group: ga,
            idx: rng.below(d),
        };
        let cb = Coord {
            expert: sb,
            pos: pb,
            group: gb,
            idx: rng.below(d),
        };
        let mut eval = |sa: f64, sb: f64| {
            nudge(&mut experts[ca.expert].1, ca, sa * h);
            nudge(&mut experts[cb.expert].1, cb, sb * h);
            let y = summed_output(&experts, x);
            nudge(&mut experts[cb.expert].1, cb, -sb * h);
            nudge(&mut experts[ca.expert].1, ca, -sa * h);
            y
        };
        let pp = eval(1.0, 1.0);
        let pm = eval(1.0, -1.0);
        let mp = eval(-1.0, 1.0);
        let mm = eval(-1.0, -1.0);
        let v = (0..d)
            .map(|r| ((pp[r] - pm[r] - mp[r] + mm[r]) / (4.0 * h * h)).abs())
            .fold(0.0, f64::max);
        out.push(v);
    }
    Ok(out)
}

/// Largest sampled mixed second derivative between atomic experts `a` and
/// `b` of one layer.
pub fn fd_cross_hessian(
    model: &MoEModel,
    x: &[f64],
    a: AtomicExpertKey,
    b: AtomicExpertKey,
    pairs: usize,
    cfg: &FDConfig,
    seed: u64,
) -> Result<f64> {
    let v = fd_mixed_partials(model, x, a, b, pairs, cfg, &mut SeededRng::new(seed))?;
    Ok(v.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedGradReport {
    /// Max |FD sensitivity to a bump in one atomic expert's output − captured
    /// gradient|, over sampled sites, channels and output coordinates.
    pub max_fd_deviation: f64,
    /// Max deviation between the gradients looked up for different channels
    /// of one expert at one token.
    pub max_stored_deviation: f64,
    pub sites: usize,
    pub evaluations: usize,
}

/// Bumps the output of atomic expert `j` by `±h` along each coordinate with
/// routing frozen and compares the central-difference loss sensitivity,
/// across channels, with the captured `∂ℓ/∂E_i`.
///
/// Both sides are multiplied by the batch token count so they are
/// per-token (sample-wise) sensitivities.
pub fn shared_gradient_check(
    model: &MoEModel,
    batch: &[Vec<u32>],
    sites: usize,
    channels_per_site: usize,
    h: f64,
    seed: u64,
) -> Result<SharedGradReport> {
    FDConfig::new(h, 0.0)?;
    let (_, trace) = lm_forward(model, batch)?;
    let (grads, _) = lm_backward(model, batch, &trace)?;
    let plan = trace.routing_plan();
    let n = trace.num_tokens() as f64;
    let d = model.config.d_model;
    let mut rng = SeededRng::new(seed);
    let mut max_fd: f64 = 0.0;
    let mut max_stored: f64 = 0.0;
    let mut evaluations = 0;
    for _ in 0..sites {
        let layer = rng.below(model.config.num_layers);
        let token = rng.below(trace.num_tokens());
        let routes = &trace.layers[layer].tokens[token].routes;
        if routes.is_empty() {
            continue;
        }
        let expert = routes[rng.below(routes.len())].expert;
        let w = &model.layers[layer].experts[expert];
        let captured = grads
            .get(layer, token, expert)
            .ok_or_else(|| Error::Consistency("routed expert missing from captured gradients".into()))?;
        let mut chans: Vec<usize> = (0..w.channels()).collect();
        rng.shuffle(&mut chans);
        chans.truncate(channels_per_site.max(1));
        for &j in &chans {
            let per_channel = grads.get(layer, token, expert).unwrap();
            let dev = per_channel.iter().zip(captured.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            max_stored = max_stored.max(dev);
            for m in 0..d {
                let mut loss_at = |s: f64| -> Result<f64> {
                    let mut delta = vec![0.0; d];
                    delta[m] = s * h;
                    let bump = OutputBump {
                        layer,
                        token,
                        expert,
                        channel: j,
                        delta,
                    };
                    let opts = ForwardOptions {
                        routing: Some(&plan),
                        bump: Some(&bump),
                        ..Default::default()
                    };
                    evaluations += 1;
                    Ok(lm_forward_with(model, batch, &opts)?.0)
                };
                let fd = (loss_at(1.0)? - loss_at(-1.0)?) / (2.0 * h);
                max_fd = max_fd.max((n * fd - n * captured[m]).abs());
            }
        }
    }
    Ok(SharedGradReport {
        max_fd_deviation: max_fd,
        max_stored_deviation: max_stored,
        sites,
        evaluations,
    })
}

/// Multiplies one routed expert's gate by 2 at `(layer, token)` with routing
/// frozen and checks that its captured gradient equals `2·g·∂ℓ/∂y`, where
/// `∂ℓ/∂y` is recovered from a sibling route at the same token. Returns the
/// max absolute deviation. Needs `κ ≥ 2`.
pub fn gate_doubling_check(model: &MoEModel, batch: &[Vec<u32>], layer: usize, token: usize) -> Result<f64> {
    let (_, trace) = lm_forward(model, batch)?;
    let plan = trace.routing_plan();
    let routes = &trace
        .layers
        .get(layer)
        .and_then(|l| l.tokens.get(token))
        .ok_or_else(|| arg_err("site outside the batch"))?
        .routes;
    if routes.len() < 2 {
        return Err(arg_err("gate doubling check needs at least two routed experts"));
    }
    let (target, sibling) = (routes[0].expert, routes[1].expert);
    let base_gate = routes[0].gate;
    let opts = ForwardOptions {
        routing: Some(&plan),
        gate_override: Some(GateOverride {
            layer,
            token,
            expert: target,
            factor: 2.0,
        }),
        ..Default::default()
    };
    let (_, t2) = lm_forward_with(model, batch, &opts)?;
    let (g2, _) = crate::model::lm_backward(model, batch, &t2)?;
    let sib_gate = t2.layers[layer].tokens[token].routes[1].gate;
    let dl_dy: Vec<f64> = g2.get(layer, token, sibling).unwrap().iter().map(|v| v / sib_gate).collect();
    let got = g2.get(layer, token, target).unwrap();
    Ok(got
        .iter()
        .zip(&dl_dy)
        .map(|(g, u)| (g - 2.0 * base_gate * u).abs())
        .fold(0.0, f64::max))
}
