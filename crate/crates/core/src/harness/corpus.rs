use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::linalg::softmax;
use crate::rng::SeededRng;

/// Synthetic order-2 Markov corpus description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab: usize,
    pub num_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub train_frac: f64,
    pub calib_frac: f64,
    pub test_frac: f64,
    /// Scale on the transition logits. 0 gives a uniform chain; larger
    /// values concentrate each row's mass on fewer tokens.
    pub skew: f64,
    /// Relative weight of the token two steps back.
    pub second_order_weight: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab: 64,
            num_sequences: 4096,
            seq_len: 64,
            seed: 0,
            train_frac: 0.9375,
            calib_frac: 0.03125,
            test_frac: 0.03125,
            skew: 2.5,
            second_order_weight: 0.5,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.seq_len < 2 || self.num_sequences == 0 {
            return Err(arg_err("corpus needs vocab >= 2, seq_len >= 2 and at least one sequence"));
        }
        let fracs = [self.train_frac, self.calib_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(arg_err("split fractions must lie in [0, 1] and sum to 1"));
        }
        if !(self.skew >= 0.0 && self.second_order_weight >= 0.0) {
            return Err(arg_err("skew and second_order_weight must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<Vec<u32>>,
    pub calib: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calib,
    Test,
}

impl Corpus {
    pub fn split(&self, which: Split) -> &[Vec<u32>] {
        match which {
            Split::Train => &self.train,
            Split::Calib => &self.calib,
            Split::Test => &self.test,
        }
    }
}

/// Transition table of the chain: row `prev2 * vocab + prev1` holds the
/// next-token distribution.
fn transition_table(spec: &CorpusSpec, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let v = spec.vocab;
    let first: Vec<Vec<f64>> = (0..v).map(|_| (0..v).map(|_| rng.normal()).collect()).collect();
    let second: Vec<Vec<f64>> = (0..v).map(|_| (0..v).map(|_| rng.normal()).collect()).collect();
    let mut rows = Vec::with_capacity(v * v);
    for p2 in 0..v {
        for p1 in 0..v {
            let z: Vec<f64> = (0..v)
                .map(|n| spec.skew * (first[p1][n] + spec.second_order_weight * second[p2][n]))
                .collect();
            rows.push(softmax(&z));
        }
    }
    rows
}

/// Seeded order-2 Markov corpus split into disjoint train/calibration/test
/// sets. No sequence occurs twice in the corpus.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let table = transition_table(spec, &mut rng);
    let v = spec.vocab;
    let mut seen = HashSet::with_capacity(spec.num_sequences);
    let mut all = Vec::with_capacity(spec.num_sequences);
    let mut attempts = 0usize;
    while all.len() < spec.num_sequences {
        attempts += 1;
        if attempts > 100 * spec.num_sequences {
            return Err(arg_err("cannot draw enough distinct sequences; raise vocab or seq_len"));
        }
        let mut seq = Vec::with_capacity(spec.seq_len);
        seq.push(rng.below(v) as u32);
        seq.push(rng.below(v) as u32);
        while seq.len() < spec.seq_len {
            let n = seq.len();
            let row = &table[seq[n - 2] as usize * v + seq[n - 1] as usize];
            seq.push(rng.categorical(row) as u32);
        }
        seq.truncate(spec.seq_len);
        if seen.insert(seq.clone()) {
            all.push(seq);
        }
    }
    let n = spec.num_sequences as f64;
    let n_train = (spec.train_frac * n).round() as usize;
    let n_calib = ((spec.calib_frac * n).round() as usize).min(all.len() - n_train);
    let test = all.split_off(n_train + n_calib);
    let calib = all.split_off(n_train);
    Ok(Corpus {
        spec: spec.clone(),
        train: all,
        calib,
        test,
    })
}

/// Entropy (nats) of the empirical unigram distribution.
pub fn unigram_entropy(seqs: &[Vec<u32>], vocab: usize) -> f64 {
    let mut counts = vec![0usize; vocab];
    let mut total = 0usize;
    for s in seqs {
        for &t in s {
            counts[t as usize] += 1;
            total += 1;
        }
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            num_sequences: 200,
            seq_len: 32,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_corpus(&small()).unwrap(), generate_corpus(&small()).unwrap());
        let other = CorpusSpec { seed: 1, ..small() };
        assert_ne!(generate_corpus(&small()).unwrap().train, generate_corpus(&other).unwrap().train);
    }

    #[test]
    fn skewed_chain_has_low_unigram_entropy() {
        let c = generate_corpus(&small()).unwrap();
        let h = unigram_entropy(&c.train, 64);
        assert!(h < (64f64).ln() - 0.05, "entropy {h}");
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let spec = CorpusSpec {
            num_sequences: 203,
            train_frac: 0.6,
            calib_frac: 0.3,
            test_frac: 0.1,
            ..small()
        };
        let c = generate_corpus(&spec).unwrap();
        assert!((c.train.len() as f64 - 0.6 * 203.0).abs() <= 1.0);
        assert!((c.calib.len() as f64 - 0.3 * 203.0).abs() <= 1.0);
        assert!((c.test.len() as f64 - 0.1 * 203.0).abs() <= 1.0);
        assert_eq!(c.train.len() + c.calib.len() + c.test.len(), 203);
        let calib: HashSet<_> = c.calib.iter().collect();
        assert!(c.test.iter().all(|s| !calib.contains(s)));
        assert!(c.train.iter().all(|s| !calib.contains(s)));
        assert!(c.train.iter().chain(&c.calib).chain(&c.test).all(|s| s.len() == 32 && s.iter().all(|&t| t < 64)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = CorpusSpec {
            train_frac: 0.9,
            ..small()
        };
        assert!(generate_corpus(&bad).is_err());
        let bad = CorpusSpec { vocab: 1, ..small() };
        assert!(generate_corpus(&bad).is_err());
    }
}
