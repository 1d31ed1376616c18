use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::linalg::{dot, quad_form, silu_grad_scalar, silu_scalar, Matrix};
use crate::model::ExpertWeights;

/// Outcome of the single-sample constrained minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedMinimum {
    /// `½ δᵀ(JᵀMJ)δ` at the least-norm `δ` with `Jδ = −e`.
    pub cost: f64,
    /// `½ eᵀ M e`.
    pub quad: f64,
    pub feasible: bool,
    /// `‖Jδ + e‖`.
    pub residual: f64,
    pub delta: Vec<f64>,
}

/// Jacobian (`d × 3d`) of atomic expert output `e_j(x)` with respect to its
/// parameters, ordered up row, gate row, down column.
pub fn atomic_jacobian(w: &ExpertWeights, j: usize, x: &[f64]) -> Result<Matrix> {
    if j >= w.channels() {
        return Err(arg_err(format!("channel position {j} out of range")));
    }
    let d = w.d_model();
    if x.len() != d {
        return Err(dim_err("input width"));
    }
    let a = dot(w.w_gate.row(j), x);
    let b = dot(w.w_up.row(j), x);
    let phi = silu_scalar(a) * b;
    let down = w.w_down.col(j);
    Ok(Matrix::from_fn(d, 3 * d, |r, c| match c / d {
        0 => down[r] * silu_scalar(a) * x[c % d],
        1 => down[r] * silu_grad_scalar(a) * b * x[c % d],
        _ => {
            if c % d == r {
                phi
            } else {
                0.0
            }
        }
    }))
}

/// Builds `J` and `M = ggᵀ` for one token, takes the least-norm `δ` solving
/// `Jδ = −e`, and returns the attained cost beside `½ eᵀMe`. A constraint
/// outside the range of `J` is reported as infeasible.
pub fn appendix_a_check(w: &ExpertWeights, j: usize, x: &[f64], g: &[f64]) -> Result<ConstrainedMinimum> {
    let d = w.d_model();
    if g.len() != d {
        return Err(dim_err("gradient width"));
    }
    let jac = atomic_jacobian(w, j, x)?;
    let e = crate::model::atomic_expert_forward(w, j, &x.to_vec().into())?.into_inner();

    let mut m = Matrix::zeros(d, d);
    m.add_outer(1.0, g, g);
    let quad = quad_form(&m, &e)?;

    let jn = DMatrix::from_row_slice(d, 3 * d, jac.data());
    let rhs = DVector::from_iterator(d, e.iter().map(|v| -v));
    let svd = jn.clone().svd(true, true);
    let delta = svd.solve(&rhs, 1e-12).map_err(|s| arg_err(s.to_string()))?;
    let jd = &jn * &delta;
    let residual = (&jd - &rhs).norm();
    let scale = rhs.norm().max(f64::MIN_POSITIVE);
    let feasible = rhs.norm() == 0.0 || residual <= 1e-9 * scale;
    let cost = quad_form(&m, jd.as_slice())?;
    Ok(ConstrainedMinimum {
        cost,
        quad,
        feasible,
        residual,
        delta: delta.iter().copied().collect(),
    })
}
