use crate::error::{arg_err, Result};
use crate::linalg::{softmax, Matrix};
use crate::rng::SeededRng;

/// Hessian of `-log softmax(z)[y]` with respect to `z`: `diag(p) − ppᵀ`.
/// It does not depend on the label.
pub fn softmax_nll_hessian(z: &[f64]) -> Matrix {
    let p = softmax(z);
    let mut h = Matrix::zeros(p.len(), p.len());
    h.add_outer(-1.0, &p, &p);
    for (i, &pi) in p.iter().enumerate() {
        h.set(i, i, h.get(i, i) + pi);
    }
    h
}

fn fixed_logits(dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(arg_err("softmax check needs dim >= 2"));
    }
    let mut rng = SeededRng::new(seed);
    Ok((0..dim).map(|_| rng.normal()).collect())
}

fn grad_outer(p: &[f64], y: usize, acc: &mut Matrix, weight: f64) {
    let mut g = p.to_vec();
    g[y] -= 1.0;
    acc.add_outer(weight, &g, &g);
}

fn rel_error(a: &Matrix, reference: &Matrix) -> f64 {
    let mut d = a.clone();
    d.scale(-1.0);
    d.add_assign(reference).expect("same shape");
    d.frobenius_norm() / reference.frobenius_norm()
}

/// Relative Frobenius error between the Monte-Carlo Fisher
/// `mean_y (p − onehot(y))(p − onehot(y))ᵀ`, `y ~ p`, and the analytic
/// Hessian, for logits drawn from `seed`.
pub fn fisher_hessian_softmax_check(dim: usize, num_samples: usize, seed: u64) -> Result<f64> {
    if num_samples == 0 {
        return Err(arg_err("need at least one sample"));
    }
    let z = fixed_logits(dim, seed)?;
    let p = softmax(&z);
    let mut rng = SeededRng::new(seed).derive(1);
    let mut fisher = Matrix::zeros(dim, dim);
    for _ in 0..num_samples {
        let y = rng.categorical(&p);
        grad_outer(&p, y, &mut fisher, 1.0);
    }
    fisher.scale(1.0 / num_samples as f64);
    Ok(rel_error(&fisher, &softmax_nll_hessian(&z)))
}

/// As [`fisher_hessian_softmax_check`] with the expectation over labels
/// taken exactly.
pub fn fisher_exact_expectation_error(dim: usize, seed: u64) -> Result<f64> {
    let z = fixed_logits(dim, seed)?;
    let p = softmax(&z);
    let mut fisher = Matrix::zeros(dim, dim);
    for (y, &py) in p.iter().enumerate() {
        grad_outer(&p, y, &mut fisher, py);
    }
    Ok(rel_error(&fisher, &softmax_nll_hessian(&z)))
}
