//! Brute-force and finite-difference verifiers for the approximations the
//! importance score relies on.

mod constrained;
mod fd;
mod fisher;
mod obs;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

pub use constrained::{appendix_a_check, atomic_jacobian, ConstrainedMinimum};
pub use fd::{fd_cross_hessian, fd_mixed_partials, gate_doubling_check, shared_gradient_check, ParamGroup, SharedGradReport};
pub use fisher::{fisher_exact_expectation_error, fisher_hessian_softmax_check, softmax_nll_hessian};
pub use obs::{
    calibration_loss, joint_loss_delta, loss_deltas, obs_prediction_report, shuffled_table, spearman, true_loss_delta,
    DecileStats, DeltaOptions, JointDelta, ObsOptions, ObsReport, ObsRow, OBS_CSV_HEADER,
};

/// Step size and acceptance threshold for a finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FDConfig {
    pub h: f64,
    pub tolerance: f64,
}

impl FDConfig {
    pub fn new(h: f64, tolerance: f64) -> Result<Self> {
        let c = Self { h, tolerance };
        c.validate()?;
        Ok(c)
    }

    /// Central second differences.
    pub fn second_order() -> Self {
        Self { h: 1e-3, tolerance: 1e-5 }
    }

    /// Central first differences.
    pub fn first_order() -> Self {
        Self { h: 1e-5, tolerance: 1e-5 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(arg_err(format!("finite-difference step {} must be positive", self.h)));
        }
        Ok(())
    }
}

impl Default for FDConfig {
    fn default() -> Self {
        Self::second_order()
    }
}
