use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::heapr::{AtomicExpertKey, ImportanceTable};
use crate::linalg::{axpy, log_softmax};
use crate::model::forward::{eval_expert, gate_values, router_logits, select_experts};
use crate::model::{lm_forward_with, ForwardOptions, ForwardTrace, MoEModel};
use crate::par::{map_indexed, Execution};
use crate::rng::SeededRng;

pub const OBS_CSV_HEADER: &str = "layer,expert,channel,predicted,measured";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaOptions {
    /// Re-run top-κ in the layers after the ablated one. The ablated layer's
    /// own selection cannot change since its input is untouched.
    pub reroute: bool,
    pub exec: Execution,
}

fn check_key(model: &MoEModel, key: AtomicExpertKey) -> Result<usize> {
    let c = &model.config;
    if key.layer >= c.num_layers || key.expert >= c.num_experts {
        return Err(arg_err(format!("key {key} outside the model")));
    }
    model.layers[key.layer].experts[key.expert]
        .position_of(key.channel)
        .ok_or_else(|| arg_err(format!("key {key} not present in the model")))
}

/// Token-weighted mean NLL over every calibration batch, optionally with
/// per-batch frozen routing.
pub fn calibration_loss(model: &MoEModel, calib: &[Vec<Vec<u32>>], frozen: Option<&[ForwardTrace]>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, batch) in calib.iter().enumerate() {
        let plan = frozen.map(|t| t[b].routing_plan());
        let opts = ForwardOptions {
            routing: plan.as_ref(),
            ..Default::default()
        };
        let (_, trace) = lm_forward_with(model, batch, &opts)?;
        total += trace.token_nll.iter().sum::<f64>();
        count += trace.num_tokens();
    }
    if count == 0 {
        return Err(arg_err("empty calibration set"));
    }
    Ok(total / count as f64)
}

fn baseline_traces(model: &MoEModel, calib: &[Vec<Vec<u32>>]) -> Result<Vec<ForwardTrace>> {
    calib
        .iter()
        .map(|b| lm_forward_with(model, b, &ForwardOptions::default()).map(|r| r.1))
        .collect()
}

fn zero_columns(model: &MoEModel, keys: &[AtomicExpertKey]) -> Result<MoEModel> {
    let mut m = model.clone();
    for &k in keys {
        let pos = check_key(model, k)?;
        let w = &mut m.layers[k.layer].experts[k.expert].w_down;
        for r in 0..w.rows() {
            w.set(r, pos, 0.0);
        }
    }
    Ok(m)
}

/// Increase in mean calibration loss when every key's output is forced to
/// zero at once (its `w_down` column zeroed). Routing is held at the
/// unablated selection unless `reroute` is set.
pub fn joint_loss_delta(model: &MoEModel, calib: &[Vec<Vec<u32>>], keys: &[AtomicExpertKey], reroute: bool) -> Result<f64> {
    let ablated = zero_columns(model, keys)?;
    let traces = baseline_traces(model, calib)?;
    let base = calibration_loss(model, calib, Some(&traces))?;
    let frozen = if reroute { None } else { Some(traces.as_slice()) };
    Ok(calibration_loss(&ablated, calib, frozen)? - base)
}

/// Reference measurement of one key's `Δℓ` with routing frozen, by running
/// the whole calibration set through an ablated copy of the model.
pub fn true_loss_delta(model: &MoEModel, calib: &[Vec<Vec<u32>>], key: AtomicExpertKey) -> Result<f64> {
    joint_loss_delta(model, calib, &[key], false)
}

/// `Δℓ` for many keys. Only tokens routed to the key's expert can change,
/// so each one is re-run from the ablated layer onward starting from its
/// cached hidden state.
pub fn loss_deltas(
    model: &MoEModel,
    calib: &[Vec<Vec<u32>>],
    keys: &[AtomicExpertKey],
    opts: DeltaOptions,
) -> Result<Vec<f64>> {
    let positions: Vec<usize> = keys.iter().map(|&k| check_key(model, k)).collect::<Result<_>>()?;
    let traces = baseline_traces(model, calib)?;
    let total: usize = traces.iter().map(ForwardTrace::num_tokens).sum();
    if total == 0 {
        return Err(arg_err("empty calibration set"));
    }
    let results = map_indexed(opts.exec, keys.len(), |i| {
        key_delta(model, &traces, keys[i], positions[i], opts.reroute).map(|s| s / total as f64)
    });
    results.into_iter().collect()
}

fn key_delta(model: &MoEModel, traces: &[ForwardTrace], key: AtomicExpertKey, pos: usize, reroute: bool) -> Result<f64> {
    let cfg = &model.config;
    let w = &model.layers[key.layer].experts[key.expert];
    let down = w.w_down.col(pos);
    let mut sum = 0.0;
    for trace in traces {
        for (t, tok) in trace.layers[key.layer].tokens.iter().enumerate() {
            let Some(route) = tok.routes.iter().find(|r| r.expert == key.expert) else {
                continue;
            };
            let mut h = match trace.layers.get(key.layer + 1) {
                Some(next) => next.tokens[t].input.clone(),
                None => trace.final_hidden[t].clone(),
            };
            axpy(-route.gate * route.phi[pos], &down, &mut h);
            for l in key.layer + 1..cfg.num_layers {
                let layer = &model.layers[l];
                let logits = router_logits(layer, &h, None);
                let selected = if reroute {
                    select_experts(cfg, layer, &logits)?
                } else {
                    trace.layers[l].tokens[t].routes.iter().map(|r| r.expert).collect()
                };
                let gates = gate_values(cfg.gate_mode, &logits, &selected);
                let mut y = vec![0.0; h.len()];
                for (&e, &g) in selected.iter().zip(&gates) {
                    axpy(g, &eval_expert(&layer.experts[e], &h, None, None).output, &mut y);
                }
                axpy(1.0, &y, &mut h);
            }
            let lp = log_softmax(&model.output_head.matvec(&h));
            sum += -lp[trace.targets[t] as usize] - trace.token_nll[t];
        }
    }
    Ok(sum)
}

/// Spearman rank correlation with average ranks for ties. Zero when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// The same keys with scores permuted among them.
pub fn shuffled_table(table: &ImportanceTable, seed: u64) -> ImportanceTable {
    let mut scores = table.scores();
    SeededRng::new(seed).shuffle(&mut scores);
    let mut t = table.clone();
    t.method = format!("{}_shuffled", table.method);
    t.entries.iter_mut().zip(scores).for_each(|(e, s)| e.score = s);
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObsOptions {
    /// Measure only this many keys, drawn without replacement.
    pub sample: Option<usize>,
    pub seed: u64,
    pub delta: DeltaOptions,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsRow {
    pub key: AtomicExpertKey,
    pub predicted: f64,
    pub measured: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileStats {
    pub count: usize,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
    /// Mean of `|predicted − measured| / max(|measured|, 1e-12)`.
    pub mean_rel_error: f64,
}

/// Summed single-key deltas beside the delta of ablating the keys jointly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDelta {
    pub keys: usize,
    pub summed_individual: f64,
    pub joint: f64,
    pub summed_predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsReport {
    pub method: String,
    pub rows: Vec<ObsRow>,
    pub spearman: f64,
    /// Rank correlation after weighting each prediction by its expert's
    /// share of calibration tokens.
    pub spearman_frequency_weighted: f64,
    pub bottom_decile: DecileStats,
    pub bottom_decile_joint: JointDelta,
    pub reroute: bool,
}

impl ObsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(OBS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:e},{:e}\n",
                r.key.layer, r.key.expert, r.key.channel, r.predicted, r.measured
            ));
        }
        out
    }

    /// Summary without the per-key rows.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            method: &'a str,
            keys: usize,
            spearman: f64,
            spearman_frequency_weighted: f64,
            bottom_decile: &'a DecileStats,
            bottom_decile_joint: &'a JointDelta,
            reroute: bool,
        }
        Ok(serde_json::to_string_pretty(&Summary {
            method: &self.method,
            keys: self.rows.len(),
            spearman: self.spearman,
            spearman_frequency_weighted: self.spearman_frequency_weighted,
            bottom_decile: &self.bottom_decile,
            bottom_decile_joint: &self.bottom_decile_joint,
            reroute: self.reroute,
        })?)
    }
}

/// Measures `Δℓ` for the table's keys (or a sample of them) and compares it
/// with the predicted scores.
pub fn obs_prediction_report(
    model: &MoEModel,
    calib: &[Vec<Vec<u32>>],
    table: &ImportanceTable,
    opts: &ObsOptions,
) -> Result<ObsReport> {
    if table.len() != model.num_atomic_experts() {
        return Err(Error::Consistency(format!(
            "table has {} entries for a model with {} atomic experts",
            table.len(),
            model.num_atomic_experts()
        )));
    }
    let mut entries: Vec<_> = table.entries.iter().collect();
    if let Some(n) = opts.sample.filter(|&n| n < entries.len()) {
        SeededRng::new(opts.seed).shuffle(&mut entries);
        entries.truncate(n);
        entries.sort_by_key(|e| e.key);
    }
    let keys: Vec<AtomicExpertKey> = entries.iter().map(|e| e.key).collect();
    let measured = loss_deltas(model, calib, &keys, opts.delta)?;
    let rows: Vec<ObsRow> = entries
        .iter()
        .zip(&measured)
        .map(|(e, &m)| ObsRow {
            key: e.key,
            predicted: e.score,
            measured: m,
        })
        .collect();
    let pred: Vec<f64> = rows.iter().map(|r| r.predicted).collect();

    let total_routed: usize = {
        let c = &model.config;
        let per_layer = calib.iter().flatten().map(|s| s.len() - 1).sum::<usize>();
        per_layer * c.kappa.max(1)
    };
    let weighted: Vec<f64> = entries
        .iter()
        .map(|e| e.score * e.token_count as f64 / total_routed.max(1) as f64)
        .collect();

    let mut by_score: Vec<usize> = (0..rows.len()).collect();
    by_score.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]).then(rows[a].key.cmp(&rows[b].key)));
    let decile: Vec<usize> = by_score[..rows.len().div_ceil(10)].to_vec();
    let errs: Vec<f64> = decile.iter().map(|&i| (rows[i].predicted - rows[i].measured).abs()).collect();
    let bottom_decile = DecileStats {
        count: decile.len(),
        mean_abs_error: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
        max_abs_error: errs.iter().copied().fold(0.0, f64::max),
        mean_rel_error: decile
            .iter()
            .zip(&errs)
            .map(|(&i, e)| e / rows[i].measured.abs().max(1e-12))
            .sum::<f64>()
            / errs.len().max(1) as f64,
    };
    let decile_keys: Vec<AtomicExpertKey> = decile.iter().map(|&i| rows[i].key).collect();
    let bottom_decile_joint = JointDelta {
        keys: decile_keys.len(),
        summed_individual: decile.iter().map(|&i| rows[i].measured).sum(),
        joint: joint_loss_delta(model, calib, &decile_keys, opts.delta.reroute)?,
        summed_predicted: decile.iter().map(|&i| rows[i].predicted).sum(),
    };

    Ok(ObsReport {
        method: table.method.clone(),
        spearman: spearman(&pred, &measured),
        spearman_frequency_weighted: spearman(&weighted, &measured),
        rows,
        bottom_decile,
        bottom_decile_joint,
        reroute: opts.delta.reroute,
    })
}
