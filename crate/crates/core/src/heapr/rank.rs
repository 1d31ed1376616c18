use std::collections::BTreeMap;

use crate::error::{arg_err, Result};

use super::{ImportanceTable, PruneManifest, RankMode, ScoredKey, TOOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankOptions {
    /// Minimum channels kept per expert. With 0 an expert may be removed
    /// entirely, which masks it out of routing.
    pub channel_floor: usize,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self { channel_floor: 1 }
    }
}

pub fn rank_global(table: &ImportanceTable, ratio: f64) -> Result<PruneManifest> {
    rank_global_with(table, ratio, RankOptions::default())
}

pub fn rank_layerwise(table: &ImportanceTable, ratio: f64) -> Result<PruneManifest> {
    rank_layerwise_with(table, ratio, RankOptions::default())
}

/// Prunes the lowest `floor(r·N)` atomic experts across the whole model.
pub fn rank_global_with(table: &ImportanceTable, ratio: f64, opts: RankOptions) -> Result<PruneManifest> {
    if table.layerwise_only {
        return Err(arg_err(format!(
            "{} scores are not comparable across layers; use layer-wise ranking",
            table.method
        )));
    }
    rank(table, ratio, opts, RankMode::Global)
}

/// Prunes the lowest `floor(r·N_l)` atomic experts within each layer.
pub fn rank_layerwise_with(table: &ImportanceTable, ratio: f64, opts: RankOptions) -> Result<PruneManifest> {
    rank(table, ratio, opts, RankMode::Layerwise)
}

pub(crate) fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(arg_err(format!("pruning ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// `floor(r·n)`, tolerant of representation error such as `0.29 * 100`.
pub(crate) fn quota(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Channel counts per `[layer][expert]` implied by a table.
pub(crate) fn channel_counts(table: &ImportanceTable) -> Vec<Vec<usize>> {
    let mut counts: Vec<Vec<usize>> = Vec::new();
    for e in &table.entries {
        let k = e.key;
        if counts.len() <= k.layer {
            counts.resize(k.layer + 1, Vec::new());
        }
        if counts[k.layer].len() <= k.expert {
            counts[k.layer].resize(k.expert + 1, 0);
        }
        counts[k.layer][k.expert] += 1;
    }
    counts
}

fn sorted_ascending(table: &ImportanceTable, layer: Option<usize>) -> Vec<ScoredKey> {
    let mut keys: Vec<ScoredKey> = table
        .entries
        .iter()
        .filter(|e| layer.is_none_or(|l| e.key.layer == l))
        .map(|e| ScoredKey {
            key: e.key,
            score: e.score,
        })
        .collect();
    keys.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.key.cmp(&b.key)));
    keys
}

fn take_lowest(
    candidates: Vec<ScoredKey>,
    budget: usize,
    floor: usize,
    remaining: &mut [Vec<usize>],
    pruned: &mut Vec<ScoredKey>,
    skipped: &mut Vec<ScoredKey>,
) {
    let mut taken = 0;
    for c in candidates {
        if taken == budget {
            break;
        }
        let left = &mut remaining[c.key.layer][c.key.expert];
        if *left > floor {
            *left -= 1;
            pruned.push(c);
            taken += 1;
        } else {
            skipped.push(c);
        }
    }
}

fn rank(table: &ImportanceTable, ratio: f64, opts: RankOptions, mode: RankMode) -> Result<PruneManifest> {
    check_ratio(ratio)?;
    let mut remaining = channel_counts(table);
    let mut pruned = Vec::new();
    let mut skipped = Vec::new();
    match mode {
        RankMode::Global => {
            let budget = quota(ratio, table.len());
            take_lowest(sorted_ascending(table, None), budget, opts.channel_floor, &mut remaining, &mut pruned, &mut skipped);
        }
        RankMode::Layerwise => {
            let mut per_layer: BTreeMap<usize, usize> = BTreeMap::new();
            for e in &table.entries {
                *per_layer.entry(e.key.layer).or_default() += 1;
            }
            for (&layer, &n) in &per_layer {
                let budget = quota(ratio, n);
                take_lowest(sorted_ascending(table, Some(layer)), budget, opts.channel_floor, &mut remaining, &mut pruned, &mut skipped);
            }
        }
    }
    Ok(PruneManifest {
        ratio,
        mode,
        method: table.method.clone(),
        channel_floor: opts.channel_floor,
        total_atomic_experts: table.len(),
        pruned,
        skipped,
        remaining_channels: remaining,
        tool_version: TOOL_VERSION.to_string(),
        config_hash: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heapr::{AtomicExpertKey, ImportanceEntry};
    use proptest::prelude::*;

    fn table(layers: usize, experts: usize, channels: usize, score: impl Fn(usize, usize, usize) -> f64) -> ImportanceTable {
        let mut entries = Vec::new();
        for l in 0..layers {
            for e in 0..experts {
                for c in 0..channels {
                    entries.push(ImportanceEntry {
                        key: AtomicExpertKey::new(l, e, c),
                        score: score(l, e, c),
                        token_count: 1,
                    });
                }
            }
        }
        ImportanceTable::new("test", entries)
    }

    #[test]
    fn zero_ratio_prunes_nothing() {
        let t = table(2, 2, 3, |l, e, c| (l * 7 + e * 3 + c) as f64);
        assert!(rank_global(&t, 0.0).unwrap().pruned.is_empty());
        assert!(rank_layerwise(&t, 0.0).unwrap().pruned.is_empty());
    }

    #[test]
    fn quota_uses_floor() {
        let t = table(1, 2, 5, |_, e, c| (e * 5 + c) as f64);
        let m = rank_global(&t, 0.25).unwrap();
        assert_eq!(m.pruned.len(), 2);
        assert_eq!(quota(0.29, 100), 29);
        assert!(rank_global(&t, 1.0).is_err());
        assert!(rank_global(&t, -0.1).is_err());
    }

    #[test]
    fn global_prefix_of_sorted_scores() {
        let t = table(2, 4, 8, |l, e, c| ((l * 31 + e * 17 + c * 7) % 23) as f64 + 0.01 * c as f64);
        let m = rank_global(&t, 0.3).unwrap();
        assert!(m.skipped.is_empty());
        let mut all = t.scores();
        all.sort_by(f64::total_cmp);
        let got: Vec<f64> = m.pruned.iter().map(|p| p.score).collect();
        assert_eq!(got, all[..got.len()].to_vec());
    }

    #[test]
    fn floor_binds_and_records_skips() {
        // Expert 0 holds the three lowest scores but can only give up two.
        let t = table(1, 2, 3, |_, e, c| if e == 0 { c as f64 } else { 10.0 + c as f64 });
        let m = rank_global(&t, 0.5).unwrap();
        assert_eq!(m.pruned.len(), 3);
        assert_eq!(m.skipped.len(), 1);
        assert_eq!(m.skipped[0].key, AtomicExpertKey::new(0, 0, 2));
        assert_eq!(m.remaining_channels, vec![vec![1, 2]]);

        let m0 = rank_global_with(&t, 0.5, RankOptions { channel_floor: 0 }).unwrap();
        assert!(m0.skipped.is_empty());
        assert_eq!(m0.remaining_channels, vec![vec![0, 3]]);
    }

    #[test]
    fn single_layer_global_equals_layerwise() {
        let t = table(1, 3, 4, |_, e, c| ((e * 5 + c * 3) % 7) as f64);
        for r in [0.1, 0.25, 0.5, 0.9] {
            let g = rank_global(&t, r).unwrap();
            let l = rank_layerwise(&t, r).unwrap();
            assert_eq!(g.pruned, l.pruned);
            assert_eq!(g.remaining_channels, l.remaining_channels);
        }
    }

    #[test]
    fn disjoint_layer_ranges() {
        // Layer 0 scores in [0, 1), layer 1 in [100, 101).
        let t = table(2, 2, 4, |l, e, c| 100.0 * l as f64 + 0.1 * (e * 4 + c) as f64);
        let g = rank_global(&t, 0.25).unwrap();
        assert!(g.pruned.iter().all(|p| p.key.layer == 0));
        let lw = rank_layerwise(&t, 0.25).unwrap();
        assert_eq!(lw.pruned.iter().filter(|p| p.key.layer == 0).count(), 2);
        assert_eq!(lw.pruned.iter().filter(|p| p.key.layer == 1).count(), 2);
    }

    #[test]
    fn layerwise_only_tables_refuse_global() {
        let mut t = table(1, 1, 4, |_, _, c| c as f64);
        t.layerwise_only = true;
        assert!(rank_global(&t, 0.25).is_err());
        assert!(rank_layerwise(&t, 0.25).is_ok());
    }

    proptest! {
        #[test]
        fn positive_scaling_keeps_manifests(seed in 0u64..10_000, factor in 1e-6f64..1e6, r in 0.0f64..0.99) {
            let t = table(2, 3, 5, |l, e, c| ((seed.wrapping_mul(2654435761) >> ((l * 15 + e * 5 + c) % 40)) % 1000) as f64);
            let s = t.scaled(factor);
            for mode in [RankMode::Global, RankMode::Layerwise] {
                let (a, b) = match mode {
                    RankMode::Global => (rank_global(&t, r).unwrap(), rank_global(&s, r).unwrap()),
                    RankMode::Layerwise => (rank_layerwise(&t, r).unwrap(), rank_layerwise(&s, r).unwrap()),
                };
                prop_assert_eq!(a.pruned_keys(), b.pruned_keys());
            }
        }

        #[test]
        fn pruned_sets_grow_with_ratio(seed in 0u64..10_000, r1 in 0.0f64..0.5, dr in 0.0f64..0.45) {
            let t = table(2, 4, 8, |l, e, c| ((seed ^ (l * 64 + e * 8 + c) as u64).wrapping_mul(0x9E3779B97F4A7C15) >> 11) as f64);
            let r2 = r1 + dr;
            let opts = RankOptions { channel_floor: 0 };
            let a = rank_global_with(&t, r1, opts).unwrap().pruned_keys();
            let b = rank_global_with(&t, r2, opts).unwrap().pruned_keys();
            prop_assert!(a.iter().all(|k| b.contains(k)));
            let a = rank_layerwise_with(&t, r1, opts).unwrap().pruned_keys();
            let b = rank_layerwise_with(&t, r2, opts).unwrap().pruned_keys();
            prop_assert!(a.iter().all(|k| b.contains(k)));
        }
    }
}
