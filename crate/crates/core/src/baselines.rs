//! Competing importance criteria at atomic-expert granularity: a CAMERA-P
//! style decoding-time energy, uniform random scores, weight magnitudes and
//! whole-expert dropping.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::heapr::{AtomicExpertKey, ImportanceEntry, ImportanceTable, PruneManifest, RankMode, ScoredKey, TOOL_VERSION};
use crate::linalg::dot;
use crate::model::{lm_forward_with, ForwardOptions, MoEModel};
use crate::par::{map_indexed, Execution};
use crate::rng::SeededRng;

pub const CAMERA_METHOD: &str = "camera";
pub const RANDOM_METHOD: &str = "random";
pub const MAGNITUDE_METHOD: &str = "magnitude";
pub const EXPERT_DROP_METHOD: &str = "expert_drop";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub alpha: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

fn col_norm(m: &crate::linalg::Matrix, j: usize) -> f64 {
    (0..m.rows()).map(|r| m.get(r, j).powi(2)).sum::<f64>().sqrt()
}

fn row_norm(m: &crate::linalg::Matrix, j: usize) -> f64 {
    dot(m.row(j), m.row(j)).sqrt()
}

pub fn camera_energy(model: &MoEModel, calib: &[Vec<Vec<u32>>], cfg: CameraConfig) -> Result<ImportanceTable> {
    camera_energy_with(model, calib, cfg, Execution::default())
}

/// Mean over routed tokens of `(‖Φ‖ + α‖Φ‖)·‖w_down[:, j]‖`. The energy
/// formula repeats the same `‖Φ‖` term on both sides of `α`; it is taken
/// literally here. `Φ` is a scalar per channel so its norm is `|Φ|`.
///
/// The table is layer-wise only.
pub fn camera_energy_with(
    model: &MoEModel,
    calib: &[Vec<Vec<u32>>],
    cfg: CameraConfig,
    exec: Execution,
) -> Result<ImportanceTable> {
    if cfg.alpha.is_nan() || cfg.alpha < 0.0 {
        return Err(arg_err(format!("camera alpha {} must be non-negative", cfg.alpha)));
    }
    let n_experts = model.config.num_experts;
    let widths: Vec<usize> = model.layers.iter().flat_map(|l| l.experts.iter().map(|e| e.channels())).collect();
    let down_norms: Vec<Vec<f64>> = model
        .layers
        .iter()
        .flat_map(|l| l.experts.iter().map(|e| (0..e.channels()).map(|j| col_norm(&e.w_down, j)).collect()))
        .collect();

    let partials = map_indexed(exec, calib.len(), |b| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let opts = ForwardOptions {
            exec: Execution::Sequential,
            ..Default::default()
        };
        let (_, trace) = lm_forward_with(model, &calib[b], &opts)?;
        let mut sums: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; w]).collect();
        let mut counts = vec![0usize; widths.len()];
        for (l, lt) in trace.layers.iter().enumerate() {
            for tok in &lt.tokens {
                for r in &tok.routes {
                    let slot = l * n_experts + r.expert;
                    counts[slot] += 1;
                    for (j, s) in sums[slot].iter_mut().enumerate() {
                        let phi = r.phi[j].abs();
                        *s += (phi + cfg.alpha * phi) * down_norms[slot][j];
                    }
                }
            }
        }
        Ok((sums, counts))
    });

    let mut sums: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; w]).collect();
    let mut counts = vec![0usize; widths.len()];
    for part in partials {
        let (s, c) = part?;
        for (dst, src) in sums.iter_mut().zip(s) {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
        counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
    }

    let mut entries = Vec::with_capacity(model.num_atomic_experts());
    for (l, layer) in model.layers.iter().enumerate() {
        for (i, e) in layer.experts.iter().enumerate() {
            let slot = l * n_experts + i;
            let n = counts[slot];
            for (j, &channel) in e.channel_ids.iter().enumerate() {
                entries.push(ImportanceEntry {
                    key: AtomicExpertKey::new(l, i, channel),
                    score: if n == 0 { 0.0 } else { sums[slot][j] / n as f64 },
                    token_count: n,
                });
            }
        }
    }
    let mut t = ImportanceTable::new(CAMERA_METHOD, entries);
    t.layerwise_only = true;
    Ok(t)
}

/// Uniform scores in (0, 1), drawn in key order.
pub fn random_importance(model: &MoEModel, seed: u64) -> ImportanceTable {
    let mut rng = SeededRng::new(seed);
    let entries = keys_of(model)
        .into_iter()
        .map(|key| ImportanceEntry {
            key,
            score: rng.open01(),
            token_count: 0,
        })
        .collect();
    ImportanceTable::new(RANDOM_METHOD, entries)
}

/// `‖w_up[j,:]‖·‖w_gate[j,:]‖·‖w_down[:,j]‖`. Data-free.
pub fn magnitude_importance(model: &MoEModel) -> ImportanceTable {
    let mut entries = Vec::with_capacity(model.num_atomic_experts());
    for (l, layer) in model.layers.iter().enumerate() {
        for (i, e) in layer.experts.iter().enumerate() {
            for (j, &channel) in e.channel_ids.iter().enumerate() {
                entries.push(ImportanceEntry {
                    key: AtomicExpertKey::new(l, i, channel),
                    score: row_norm(&e.w_up, j) * row_norm(&e.w_gate, j) * col_norm(&e.w_down, j),
                    token_count: 0,
                });
            }
        }
    }
    ImportanceTable::new(MAGNITUDE_METHOD, entries)
}

fn keys_of(model: &MoEModel) -> Vec<AtomicExpertKey> {
    let mut keys = Vec::with_capacity(model.num_atomic_experts());
    for (l, layer) in model.layers.iter().enumerate() {
        for (i, e) in layer.experts.iter().enumerate() {
            keys.extend(e.channel_ids.iter().map(|&c| AtomicExpertKey::new(l, i, c)));
        }
    }
    keys
}

/// Per-expert score sums, keyed by `(layer, expert)` in key order.
pub fn expert_aggregates(table: &ImportanceTable) -> Vec<((usize, usize), f64, usize)> {
    let mut out: Vec<((usize, usize), f64, usize)> = Vec::new();
    for e in &table.entries {
        let id = (e.key.layer, e.key.expert);
        match out.last_mut() {
            Some(last) if last.0 == id => {
                last.1 += e.score;
                last.2 += 1;
            }
            _ => out.push((id, e.score, 1)),
        }
    }
    out
}

/// Drops whole experts in ascending order of summed score until at least
/// `floor(r·N)` atomic experts are gone. A budget of zero drops nothing.
pub fn expert_drop_manifest(table: &ImportanceTable, ratio: f64) -> Result<PruneManifest> {
    crate::heapr::check_ratio(ratio)?;
    let budget = crate::heapr::quota(ratio, table.len());
    let mut experts = expert_aggregates(table);
    let mut remaining: Vec<Vec<usize>> = Vec::new();
    for &((l, i), _, n) in &experts {
        if remaining.len() <= l {
            remaining.resize(l + 1, Vec::new());
        }
        if remaining[l].len() <= i {
            remaining[l].resize(i + 1, 0);
        }
        remaining[l][i] = n;
    }
    experts.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let mut pruned = Vec::new();
    for ((l, i), _, _) in experts {
        if pruned.len() >= budget {
            break;
        }
        for e in table.entries.iter().filter(|e| e.key.layer == l && e.key.expert == i) {
            pruned.push(ScoredKey {
                key: e.key,
                score: e.score,
            });
        }
        remaining[l][i] = 0;
    }
    Ok(PruneManifest {
        ratio,
        mode: RankMode::Global,
        method: EXPERT_DROP_METHOD.into(),
        channel_floor: 0,
        total_atomic_experts: table.len(),
        pruned,
        skipped: Vec::new(),
        remaining_channels: remaining,
        tool_version: TOOL_VERSION.to_string(),
        config_hash: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heapr::{make_batches, rank_global, rank_layerwise};
    use crate::model::{init_model, lm_forward, MoEConfig};

    fn model() -> MoEModel {
        init_model(&MoEConfig {
            d_model: 6,
            d_inter: 5,
            num_experts: 4,
            kappa: 2,
            num_layers: 2,
            vocab: 12,
            seq_len: 10,
            seed: 5,
            ..MoEConfig::default()
        })
        .unwrap()
    }

    fn calib(seed: u64) -> Vec<Vec<Vec<u32>>> {
        let mut rng = SeededRng::new(seed);
        let seqs: Vec<Vec<u32>> = (0..12).map(|_| (0..10).map(|_| rng.below(12) as u32).collect()).collect();
        make_batches(&seqs, 4)
    }

    #[test]
    fn camera_matches_naive_recomputation() {
        let m = model();
        let c = calib(1);
        let t = camera_energy(&m, &c, CameraConfig::default()).unwrap();
        assert!(t.layerwise_only);
        let mut sums = std::collections::BTreeMap::<AtomicExpertKey, (f64, usize)>::new();
        for batch in &c {
            let (_, trace) = lm_forward(&m, batch).unwrap();
            for (l, lt) in trace.layers.iter().enumerate() {
                for tok in &lt.tokens {
                    for r in &tok.routes {
                        let e = &m.layers[l].experts[r.expert];
                        let x = &tok.input;
                        for j in 0..e.channels() {
                            let a = dot(e.w_gate.row(j), x);
                            let phi = a / (1.0 + (-a).exp()) * dot(e.w_up.row(j), x);
                            let norm: f64 = e.w_down.col(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                            let s = sums.entry(AtomicExpertKey::new(l, r.expert, j)).or_default();
                            s.0 += 2.0 * phi.abs() * norm;
                            s.1 += 1;
                        }
                    }
                }
            }
        }
        for e in &t.entries {
            let want = sums.get(&e.key).map_or(0.0, |(s, n)| s / *n as f64);
            assert!((e.score - want).abs() < 1e-10, "{} {} {}", e.key, e.score, want);
        }
    }

    #[test]
    fn camera_alpha_zero_halves_and_zero_column_vanishes() {
        let mut m = model();
        for r in 0..6 {
            m.layers[1].experts[2].w_down.set(r, 3, 0.0);
        }
        let c = calib(2);
        let one = camera_energy(&m, &c, CameraConfig { alpha: 1.0 }).unwrap();
        let zero = camera_energy(&m, &c, CameraConfig { alpha: 0.0 }).unwrap();
        for (a, b) in one.entries.iter().zip(&zero.entries) {
            assert!((a.score - 2.0 * b.score).abs() <= 1e-12 * a.score.abs().max(1.0));
            assert!(a.score >= 0.0);
        }
        assert_eq!(one.get(&AtomicExpertKey::new(1, 2, 3)).unwrap().score, 0.0);
        assert!(camera_energy(&m, &c, CameraConfig { alpha: -1.0 }).is_err());
    }

    #[test]
    fn camera_refused_globally() {
        let m = model();
        let t = camera_energy(&m, &calib(3), CameraConfig::default()).unwrap();
        assert!(rank_global(&t, 0.2).is_err());
        assert!(rank_layerwise(&t, 0.2).is_ok());
    }

    #[test]
    fn camera_ignores_other_experts_data() {
        // Layer 1 is last, so rescaling one of its experts leaves every
        // layer input and routing decision alone.
        let m = model();
        let c = calib(4);
        let base = camera_energy(&m, &c, CameraConfig::default()).unwrap();
        let mut m2 = m.clone();
        m2.layers[1].experts[0].w_up.scale(3.0);
        let other = camera_energy(&m2, &c, CameraConfig::default()).unwrap();
        for (a, b) in base.entries.iter().zip(&other.entries) {
            if (a.key.layer, a.key.expert) != (1, 0) {
                assert_eq!(a.score, b.score, "{}", a.key);
            }
        }
    }

    #[test]
    fn random_is_seeded_and_in_range() {
        let m = init_model(&MoEConfig::default()).unwrap();
        let a = random_importance(&m, 7);
        assert_eq!(a, random_importance(&m, 7));
        assert!(a.scores().iter().all(|&s| s > 0.0 && s < 1.0));
        let b = random_importance(&m, 8);
        assert!(a.len() >= 100);
        let same = a.entries.iter().zip(&b.entries).filter(|(x, y)| x.score == y.score).count();
        assert!(same * 100 <= a.len());
    }

    #[test]
    fn magnitude_matches_naive_and_scales() {
        let m = model();
        let t = magnitude_importance(&m);
        for e in &t.entries {
            let w = &m.layers[e.key.layer].experts[e.key.expert];
            let j = e.key.channel;
            let n = |v: Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let want = n(w.w_up.row(j).to_vec()) * n(w.w_gate.row(j).to_vec()) * n(w.w_down.col(j));
            assert!((e.score - want).abs() < 1e-12);
        }
        let mut m2 = m.clone();
        m2.layers[0].experts[1].w_down.scale(2.0);
        let t2 = magnitude_importance(&m2);
        for (a, b) in t.entries.iter().zip(&t2.entries) {
            let f = if a.key.layer == 0 && a.key.expert == 1 { 2.0 } else { 1.0 };
            assert!((b.score - f * a.score).abs() < 1e-12);
        }
        let mut m3 = m.clone();
        m3.layers[1].experts[3].w_gate.row_mut(2).fill(0.0);
        assert_eq!(magnitude_importance(&m3).get(&AtomicExpertKey::new(1, 3, 2)).unwrap().score, 0.0);
    }

    fn uniform(layers: usize, experts: usize, channels: usize, s: impl Fn(usize, usize, usize) -> f64) -> ImportanceTable {
        let mut entries = Vec::new();
        for l in 0..layers {
            for e in 0..experts {
                for c in 0..channels {
                    entries.push(ImportanceEntry {
                        key: AtomicExpertKey::new(l, e, c),
                        score: s(l, e, c),
                        token_count: 1,
                    });
                }
            }
        }
        ImportanceTable::new("t", entries)
    }

    #[test]
    fn expert_drop_budget_and_order() {
        let t = uniform(2, 4, 4, |_, _, _| 1.0);
        // 32 channels; r = 0.03 gives a zero budget.
        assert!(expert_drop_manifest(&t, 0.03).unwrap().pruned.is_empty());
        let m = expert_drop_manifest(&t, 0.2).unwrap();
        // budget 6: two experts in key order.
        let experts: Vec<(usize, usize)> = m.pruned.iter().map(|p| (p.key.layer, p.key.expert)).collect();
        assert_eq!(m.pruned.len(), 8);
        assert!(experts.iter().all(|&e| e == (0, 0) || e == (0, 1)));
        assert_eq!(m.remaining_channels[0], vec![0, 0, 4, 4]);
        assert!(expert_drop_manifest(&t, 1.0).is_err());
    }

    #[test]
    fn expert_drop_aggregates_match_naive_sums() {
        let t = uniform(2, 3, 5, |l, e, c| ((l * 7 + e * 11 + c * 13) % 17) as f64);
        let agg = expert_aggregates(&t);
        for ((l, e), s, n) in agg {
            let want: f64 = t.entries.iter().filter(|x| x.key.layer == l && x.key.expert == e).map(|x| x.score).sum();
            assert_eq!(s, want);
            assert_eq!(n, 5);
        }
        let m = expert_drop_manifest(&t, 0.5).unwrap();
        // Whole groups only.
        for p in &m.pruned {
            assert_eq!(m.pruned.iter().filter(|q| (q.key.layer, q.key.expert) == (p.key.layer, p.key.expert)).count(), 5);
        }
        assert!(m.pruned.len() >= 15 && m.pruned.len() < 15 + 5);
    }
}
