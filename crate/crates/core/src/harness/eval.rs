use std::collections::HashSet;

use crate::error::{arg_err, Error, Result};
use crate::model::{lm_forward_with, ForwardOptions, MoEModel};
use crate::par::Execution;

/// Sequences per forward call; bounds trace memory on large splits.
const EVAL_CHUNK: usize = 256;

/// Token NLLs over a split in sequence order.
pub fn token_nll(model: &MoEModel, seqs: &[Vec<u32>], exec: Execution) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Err(arg_err("cannot evaluate an empty split"));
    }
    let opts = ForwardOptions {
        exec,
        ..Default::default()
    };
    let mut nll = Vec::new();
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let (_, trace) = lm_forward_with(model, chunk, &opts)?;
        nll.extend(trace.token_nll);
    }
    Ok(nll)
}

/// `exp` of the mean next-token NLL over every predicted position.
pub fn perplexity(model: &MoEModel, seqs: &[Vec<u32>]) -> Result<f64> {
    perplexity_with(model, seqs, Execution::default())
}

pub fn perplexity_with(model: &MoEModel, seqs: &[Vec<u32>], exec: Execution) -> Result<f64> {
    let nll = token_nll(model, seqs, exec)?;
    Ok((nll.iter().sum::<f64>() / nll.len() as f64).exp())
}

/// Fails if any sequence occurs in both splits.
pub fn check_disjoint(a: &[Vec<u32>], b: &[Vec<u32>]) -> Result<()> {
    let seen: HashSet<&[u32]> = a.iter().map(Vec::as_slice).collect();
    match b.iter().position(|s| seen.contains(s.as_slice())) {
        Some(i) => Err(Error::Data(format!("sequence {i} of the evaluation split also occurs in the other split"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, lm_forward, MoEConfig};
    use crate::rng::SeededRng;

    fn model() -> MoEModel {
        init_model(&MoEConfig {
            d_model: 8,
            d_inter: 4,
            num_experts: 4,
            vocab: 16,
            ..MoEConfig::default()
        })
        .unwrap()
    }

    fn seqs(n: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut r = SeededRng::new(seed);
        (0..n).map(|_| (0..10).map(|_| r.below(16) as u32).collect()).collect()
    }

    #[test]
    fn matches_exp_of_forward_loss() {
        let m = model();
        let s = seqs(20, 1);
        let (loss, _) = lm_forward(&m, &s).unwrap();
        assert_eq!(perplexity(&m, &s).unwrap(), loss.exp());
    }

    #[test]
    fn chunking_is_invisible() {
        let m = model();
        let s = seqs(EVAL_CHUNK + 7, 2);
        let whole = lm_forward(&m, &s).unwrap().0.exp();
        assert_eq!(perplexity_with(&m, &s, Execution::Sequential).unwrap(), whole);
    }

    #[test]
    fn untrained_model_near_vocab_on_uniform_tokens() {
        let m = model();
        let p = perplexity(&m, &seqs(200, 3)).unwrap();
        assert!((p / 16.0 - 1.0).abs() < 0.15, "{p}");
    }

    #[test]
    fn empty_split_is_rejected() {
        assert!(matches!(perplexity(&model(), &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn disjointness() {
        let a = seqs(5, 4);
        let b = seqs(5, 5);
        assert!(check_disjoint(&a, &b).is_ok());
        let mut c = b.clone();
        c.push(a[2].clone());
        assert!(check_disjoint(&a, &c).is_err());
    }
}
