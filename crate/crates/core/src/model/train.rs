use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::par::Execution;
use crate::rng::SeededRng;

use super::backward::lm_backward_with;
use super::forward::{lm_forward_with, ForwardOptions};
use super::MoEModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `lr` to `lr * lr_floor` over the step budget.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball momentum.
    Momentum,
    /// Adam with `momentum` as the first-moment decay.
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Sequences per step; 0 means the whole corpus every step.
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub lr_floor: f64,
    /// Stop once the step gradient norm falls below this.
    pub grad_tol: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub beta2: f64,
    pub eps: f64,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.005,
            momentum: 0.9,
            batch_size: 64,
            schedule: LrSchedule::Cosine,
            lr_floor: 0.02,
            grad_tol: 1e-4,
            seed: 0,
            optimizer: Optimizer::Adam,
            beta2: 0.999,
            eps: 1e-8,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: usize,
    /// Loss of every step's batch, before the update.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub converged: bool,
}

impl TrainConfig {
    fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let floor = self.lr_floor;
                let t = step as f64 / self.steps.max(1) as f64;
                let c = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                self.lr * (floor + (1.0 - floor) * c)
            }
        }
    }
}

/// Minibatch training on the mean next-token NLL.
pub fn train(
    mut model: MoEModel,
    corpus: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<(MoEModel, TrainReport)> {
    if corpus.is_empty() {
        return Err(arg_err("empty training corpus"));
    }
    if !(cfg.lr >= 0.0 && (0.0..1.0).contains(&cfg.momentum)) {
        return Err(arg_err("learning rate must be >= 0 and momentum in [0, 1)"));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = corpus.len();
    let batch_size = if cfg.batch_size == 0 {
        corpus.len()
    } else {
        cfg.batch_size.min(corpus.len())
    };

    if cfg.optimizer == Optimizer::Adam && !((0.0..1.0).contains(&cfg.beta2) && cfg.eps > 0.0) {
        return Err(arg_err("adam needs beta2 in [0, 1) and eps > 0"));
    }
    if !(0.0..=1.0).contains(&cfg.lr_floor) {
        return Err(arg_err("lr_floor must lie in [0, 1]"));
    }
    let mut velocity: Vec<Vec<f64>> = model.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
    let mut second: Vec<Vec<f64>> = match cfg.optimizer {
        Optimizer::Adam => velocity.clone(),
        Optimizer::Momentum => Vec::new(),
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut grad_norm = f64::NAN;
    let mut converged = false;
    let mut last_good = model.clone();
    let opts = ForwardOptions {
        exec: cfg.exec,
        ..Default::default()
    };

    for step in 0..cfg.steps {
        let batch: Vec<Vec<u32>> = if batch_size == corpus.len() {
            corpus.to_vec()
        } else {
            if cursor + batch_size > order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let b = order[cursor..cursor + batch_size].iter().map(|&i| corpus[i].clone()).collect();
            cursor += batch_size;
            b
        };
        let (loss, trace) = lm_forward_with(&model, &batch, &opts)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss became {loss}"),
                last_good: Box::new(last_good),
            });
        }
        let (_, grads) = lm_backward_with(&model, &batch, &trace, cfg.exec)?;
        losses.push(loss);
        grad_norm = grads.norm();
        if grad_norm < cfg.grad_tol {
            converged = true;
            break;
        }
        last_good.clone_from(&model);
        let lr = cfg.lr_at(step);
        match cfg.optimizer {
            Optimizer::Momentum => {
                for ((param, grad), vel) in model
                    .param_slices_mut()
                    .into_iter()
                    .zip(grads.param_slices())
                    .zip(velocity.iter_mut())
                {
                    for ((p, g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                        *v = cfg.momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
            Optimizer::Adam => {
                let (beta2, eps) = (cfg.beta2, cfg.eps);
                let b1 = cfg.momentum;
                let t = (step + 1) as i32;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - beta2.powi(t));
                for (((param, grad), m1), m2) in model
                    .param_slices_mut()
                    .into_iter()
                    .zip(grads.param_slices())
                    .zip(velocity.iter_mut())
                    .zip(second.iter_mut())
                {
                    for (((p, g), a), b) in param.iter_mut().zip(grad).zip(m1.iter_mut()).zip(m2.iter_mut()) {
                        *a = b1 * *a + (1.0 - b1) * g;
                        *b = beta2 * *b + (1.0 - beta2) * g * g;
                        *p -= lr * (*a / c1) / ((*b / c2).sqrt() + eps);
                    }
                }
            }
        }
        if !model.param_slices().iter().all(|s| s.iter().all(|x| x.is_finite())) {
            return Err(Error::Training {
                step,
                reason: "non-finite weights after update".into(),
                last_good: Box::new(last_good),
            });
        }
    }

    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    let report = TrainReport {
        steps_run: losses.len(),
        losses,
        final_loss,
        final_grad_norm: grad_norm,
        converged,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, MoEConfig};

    fn small_corpus() -> Vec<Vec<u32>> {
        // Deterministic cyclic structure: next = (3 * cur + 1) mod 16.
        (0..24u32)
            .map(|s| {
                let mut t = s % 16;
                (0..12)
                    .map(|_| {
                        let cur = t;
                        t = (3 * t + 1) % 16;
                        cur
                    })
                    .collect()
            })
            .collect()
    }

    fn small_model() -> MoEModel {
        init_model(&MoEConfig {
            d_model: 8,
            d_inter: 4,
            num_experts: 4,
            kappa: 2,
            num_layers: 1,
            vocab: 16,
            seq_len: 12,
            seed: 0,
            ..MoEConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let m = small_model();
        let cfg = TrainConfig {
            steps: 5,
            lr: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (trained, report) = train(m.clone(), &small_corpus(), &cfg).unwrap();
        assert_eq!(trained, m);
        assert_eq!(report.steps_run, 5);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = TrainConfig {
            steps: 60,
            lr: 0.3,
            batch_size: 8,
            exec: Execution::Sequential,
            ..TrainConfig::default()
        };
        let (a, ra) = train(small_model(), &small_corpus(), &cfg).unwrap();
        let par = TrainConfig {
            exec: Execution::Parallel,
            ..cfg.clone()
        };
        let (b, rb) = train(small_model(), &small_corpus(), &par).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.final_loss < ra.losses[0] * 0.7, "{} -> {}", ra.losses[0], ra.final_loss);
    }

    #[test]
    fn divergence_reports_last_good_model() {
        let cfg = TrainConfig {
            steps: 200,
            lr: 1e6,
            batch_size: 0,
            schedule: LrSchedule::Constant,
            optimizer: Optimizer::Momentum,
            ..TrainConfig::default()
        };
        match train(small_model(), &small_corpus(), &cfg) {
            Err(Error::Training { last_good, .. }) => {
                assert!(last_good.param_slices().iter().all(|s| s.iter().all(|x| x.is_finite())));
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1.final_loss)),
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(train(small_model(), &[], &TrainConfig::default()).is_err());
        let cfg = TrainConfig {
            momentum: 1.5,
            ..TrainConfig::default()
        };
        assert!(train(small_model(), &small_corpus(), &cfg).is_err());
    }
}
