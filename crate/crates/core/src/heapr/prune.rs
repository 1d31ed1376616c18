use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::MoEModel;

use super::PruneManifest;

/// Physically removes the manifest's atomic experts: row `j` of `W_up` and
/// `W_gate` and column `j` of `W_down`. The router is left untouched; an
/// expert left with no channels is masked out of routing.
pub fn apply_prune(model: &MoEModel, manifest: &PruneManifest) -> Result<MoEModel> {
    let cfg = &model.config;
    let mut drop: Vec<Vec<BTreeSet<usize>>> = vec![vec![BTreeSet::new(); cfg.num_experts]; cfg.num_layers];
    for p in &manifest.pruned {
        let k = p.key;
        if k.layer >= cfg.num_layers || k.expert >= cfg.num_experts {
            return Err(Error::Consistency(format!("pruned key {k} is outside the model")));
        }
        if model.layers[k.layer].experts[k.expert].position_of(k.channel).is_none() {
            return Err(Error::Consistency(format!("pruned key {k} is not present in the model")));
        }
        if !drop[k.layer][k.expert].insert(k.channel) {
            return Err(Error::Consistency(format!("pruned key {k} listed twice")));
        }
    }

    let mut out = model.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        for (i, expert) in layer.experts.iter_mut().enumerate() {
            let gone = &drop[l][i];
            if gone.is_empty() {
                continue;
            }
            let keep: Vec<usize> = (0..expert.channels())
                .filter(|&j| !gone.contains(&expert.channel_ids[j]))
                .collect();
            expert.w_up = expert.w_up.select_rows(&keep);
            expert.w_gate = expert.w_gate.select_rows(&keep);
            expert.w_down = expert.w_down.select_cols(&keep);
            expert.channel_ids = keep.iter().map(|&j| expert.channel_ids[j]).collect();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heapr::{rank_global, AtomicExpertKey, ImportanceEntry, ImportanceTable, RankMode, ScoredKey};
    use crate::linalg::Vector;
    use crate::model::{atomic_expert_forward, init_model, lm_forward, MoEConfig};

    fn manifest(keys: &[AtomicExpertKey]) -> PruneManifest {
        PruneManifest {
            ratio: 0.0,
            mode: RankMode::Global,
            method: "manual".into(),
            channel_floor: 0,
            total_atomic_experts: 0,
            pruned: keys.iter().map(|&key| ScoredKey { key, score: 0.0 }).collect(),
            skipped: vec![],
            remaining_channels: vec![],
            tool_version: String::new(),
            config_hash: None,
        }
    }

    fn cfg() -> MoEConfig {
        MoEConfig {
            d_model: 6,
            d_inter: 4,
            num_experts: 3,
            kappa: 2,
            num_layers: 2,
            vocab: 10,
            seq_len: 8,
            seed: 21,
            ..MoEConfig::default()
        }
    }

    #[test]
    fn empty_manifest_is_identity() {
        let m = init_model(&cfg()).unwrap();
        assert_eq!(apply_prune(&m, &manifest(&[])).unwrap(), m);
    }

    #[test]
    fn removing_zero_channels_changes_nothing() {
        let mut m = init_model(&cfg()).unwrap();
        let keys = [AtomicExpertKey::new(0, 1, 2), AtomicExpertKey::new(1, 0, 0), AtomicExpertKey::new(1, 2, 3)];
        for k in keys {
            let e = &mut m.layers[k.layer].experts[k.expert];
            for r in 0..6 {
                e.w_down.set(r, k.channel, 0.0);
            }
        }
        let pruned = apply_prune(&m, &manifest(&keys)).unwrap();
        let batch = vec![vec![1, 4, 2, 9, 0, 3, 3, 7], vec![5, 5, 6, 1, 8, 2, 0, 4]];
        let (a, ta) = lm_forward(&m, &batch).unwrap();
        let (b, tb) = lm_forward(&pruned, &batch).unwrap();
        assert!((a - b).abs() < 1e-12);
        for (x, y) in ta.final_hidden.iter().flatten().zip(tb.final_hidden.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pruned_expert_equals_original_minus_atomic_outputs() {
        let m = init_model(&cfg()).unwrap();
        let keys = [AtomicExpertKey::new(0, 0, 1), AtomicExpertKey::new(0, 0, 3)];
        let pruned = apply_prune(&m, &manifest(&keys)).unwrap();
        let orig = &m.layers[0].experts[0];
        let cut = &pruned.layers[0].experts[0];
        assert_eq!(cut.channel_ids, vec![0, 2]);
        let x: Vector = vec![0.3, -0.7, 0.1, 0.9, -0.2, 0.5].into();
        let (full, _) = crate::model::expert_forward(orig, &x).unwrap();
        let (small, _) = crate::model::expert_forward(cut, &x).unwrap();
        let removed: Vec<Vector> = [1, 3].iter().map(|&j| atomic_expert_forward(orig, j, &x).unwrap()).collect();
        for r in 0..6 {
            let want = full[r] - removed.iter().map(|v| v[r]).sum::<f64>();
            assert!((small[r] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn bad_keys_are_rejected() {
        let m = init_model(&cfg()).unwrap();
        for k in [AtomicExpertKey::new(2, 0, 0), AtomicExpertKey::new(0, 3, 0), AtomicExpertKey::new(0, 0, 4)] {
            assert!(matches!(apply_prune(&m, &manifest(&[k])), Err(Error::Consistency(_))));
        }
        let twice = [AtomicExpertKey::new(0, 0, 0), AtomicExpertKey::new(0, 0, 0)];
        assert!(apply_prune(&m, &manifest(&twice)).is_err());
        // Already-pruned channel.
        let once = apply_prune(&m, &manifest(&twice[..1])).unwrap();
        assert!(apply_prune(&once, &manifest(&twice[..1])).is_err());
    }

    #[test]
    fn fully_removed_expert_is_masked() {
        let m = init_model(&cfg()).unwrap();
        let keys: Vec<AtomicExpertKey> = (0..4).map(|c| AtomicExpertKey::new(0, 1, c)).collect();
        let pruned = apply_prune(&m, &manifest(&keys)).unwrap();
        assert_eq!(pruned.layers[0].live_experts(), 2);
        let (loss, trace) = lm_forward(&pruned, &[vec![1, 2, 3, 4, 5, 6, 7, 8]]).unwrap();
        assert!(loss.is_finite());
        assert!(trace.layers[0].tokens.iter().all(|t| t.routes.iter().all(|r| r.expert != 1)));
    }

    #[test]
    fn ranked_manifest_applies() {
        let m = init_model(&cfg()).unwrap();
        let entries = (0..2)
            .flat_map(|l| (0..3).flat_map(move |e| (0..4).map(move |c| (l, e, c))))
            .map(|(l, e, c)| ImportanceEntry {
                key: AtomicExpertKey::new(l, e, c),
                score: ((l * 13 + e * 5 + c * 3) % 11) as f64,
                token_count: 1,
            })
            .collect();
        let t = ImportanceTable::new("t", entries);
        let man = rank_global(&t, 0.5).unwrap();
        let p = apply_prune(&m, &man).unwrap();
        assert_eq!(p.num_atomic_experts(), 24 - man.pruned.len());
        for (l, layer) in p.layers.iter().enumerate() {
            for (e, ex) in layer.experts.iter().enumerate() {
                assert_eq!(ex.channels(), man.remaining_channels[l][e]);
            }
        }
    }
}
