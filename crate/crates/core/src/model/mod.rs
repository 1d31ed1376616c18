//! Toy mixture-of-experts language model.
//!
//! Token embedding, `num_layers` blocks of `h ← h + MoE(h)`, and a linear
//! output head. Each expert is a SiLU-gated feed-forward block whose
//! intermediate channels ("atomic experts") can be removed independently,
//! so expert widths become ragged after pruning.

mod backward;
mod checkpoint;
pub(crate) mod forward;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

pub use backward::{lm_backward, lm_backward_with, ExpertGrads, ExpertOutputGrads, LayerGrads, ModelGrads, RoutedGrad};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use forward::{
    atomic_expert_forward, expert_forward, lm_forward, lm_forward_with, moe_layer_forward,
    FlopCounter, ForwardOptions, ForwardTrace, GateOverride, LayerTrace, OutputBump, RouteTrace,
    RoutingPlan, TokenTrace,
};
pub use train::{train, LrSchedule, Optimizer, TrainConfig, TrainReport};

/// How router scores become gate values for the selected experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Softmax over all experts, keep top-κ, renormalize to sum 1.
    #[default]
    SoftmaxRenorm,
    /// Softmax over all experts, keep top-κ without renormalizing.
    Softmax,
    /// Raw router logits of the selected experts.
    RawLogits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoEConfig {
    pub d_model: usize,
    pub d_inter: usize,
    pub num_experts: usize,
    pub kappa: usize,
    pub num_layers: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub gate_mode: GateMode,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_inter: 16,
            num_experts: 8,
            kappa: 2,
            num_layers: 2,
            vocab: 64,
            seq_len: 64,
            seed: 0,
            gate_mode: GateMode::SoftmaxRenorm,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("d_inter", self.d_inter),
            ("num_experts", self.num_experts),
            ("kappa", self.kappa),
            ("num_layers", self.num_layers),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(arg_err(format!("{name} must be at least 1")));
            }
        }
        if self.kappa > self.num_experts {
            return Err(arg_err(format!(
                "kappa={} exceeds num_experts={}",
                self.kappa, self.num_experts
            )));
        }
        Ok(())
    }

    /// Total atomic experts in an unpruned model.
    pub fn num_atomic_experts(&self) -> usize {
        self.num_layers * self.num_experts * self.d_inter
    }
}

/// One gated feed-forward expert.
///
/// Row `j` of `w_up`/`w_gate` and column `j` of `w_down` form the `j`-th
/// atomic expert. `channel_ids[j]` is that channel's index in the unpruned
/// expert, so keys stay stable across pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeights {
    pub w_up: Matrix,
    pub w_gate: Matrix,
    pub w_down: Matrix,
    pub channel_ids: Vec<usize>,
}

impl ExpertWeights {
    pub fn new(w_up: Matrix, w_gate: Matrix, w_down: Matrix) -> Result<Self> {
        let c = w_up.rows();
        let e = Self {
            channel_ids: (0..c).collect(),
            w_up,
            w_gate,
            w_down,
        };
        e.check(e.w_up.cols())?;
        Ok(e)
    }

    /// Current number of atomic experts.
    pub fn channels(&self) -> usize {
        self.w_up.rows()
    }

    pub fn d_model(&self) -> usize {
        self.w_up.cols()
    }

    /// Position of an original channel id, if it is still present.
    pub fn position_of(&self, channel_id: usize) -> Option<usize> {
        self.channel_ids.iter().position(|&c| c == channel_id)
    }

    fn check(&self, d_model: usize) -> Result<()> {
        let c = self.channel_ids.len();
        let ok = self.w_up.shape() == (c, d_model)
            && self.w_gate.shape() == (c, d_model)
            && self.w_down.shape() == (d_model, c);
        if !ok {
            return Err(Error::Dimension(format!(
                "expert shapes up={:?} gate={:?} down={:?} for {c} channels at d_model={d_model}",
                self.w_up.shape(),
                self.w_gate.shape(),
                self.w_down.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterWeights {
    /// `num_experts × d_model` router projection.
    pub w_router: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoELayer {
    pub router: RouterWeights,
    pub experts: Vec<ExpertWeights>,
}

impl MoELayer {
    /// Number of experts that still have at least one channel. Experts with
    /// zero channels are masked out of routing.
    pub fn live_experts(&self) -> usize {
        self.experts.iter().filter(|e| e.channels() > 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEModel {
    pub config: MoEConfig,
    /// `vocab × d_model`.
    pub token_embedding: Matrix,
    pub layers: Vec<MoELayer>,
    /// `vocab × d_model`.
    pub output_head: Matrix,
}

fn uniform_matrix(rng: &mut SeededRng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

/// Seeded initialization: every projection is uniform in `±1/√fan_in`,
/// embeddings uniform in `±1`.
pub fn init_model(config: &MoEConfig) -> Result<MoEModel> {
    config.validate()?;
    let d = config.d_model;
    let c = config.d_inter;
    let mut rng = SeededRng::new(config.seed);
    let token_embedding = uniform_matrix(&mut rng, config.vocab, d, 1.0);
    let in_bound = 1.0 / (d as f64).sqrt();
    let down_bound = 1.0 / (c as f64).sqrt();
    let layers = (0..config.num_layers)
        .map(|_| {
            let router = RouterWeights {
                w_router: uniform_matrix(&mut rng, config.num_experts, d, in_bound),
            };
            let experts = (0..config.num_experts)
                .map(|_| {
                    let w_up = uniform_matrix(&mut rng, c, d, in_bound);
                    let w_gate = uniform_matrix(&mut rng, c, d, in_bound);
                    let w_down = uniform_matrix(&mut rng, d, c, down_bound);
                    ExpertWeights {
                        w_up,
                        w_gate,
                        w_down,
                        channel_ids: (0..c).collect(),
                    }
                })
                .collect();
            MoELayer { router, experts }
        })
        .collect();
    let output_head = uniform_matrix(&mut rng, config.vocab, d, in_bound);
    Ok(MoEModel {
        config: config.clone(),
        token_embedding,
        layers,
        output_head,
    })
}

impl MoEModel {
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let d = cfg.d_model;
        if self.token_embedding.shape() != (cfg.vocab, d) || self.output_head.shape() != (cfg.vocab, d)
        {
            return Err(Error::Dimension("embedding or head shape".into()));
        }
        if self.layers.len() != cfg.num_layers {
            return Err(Error::Dimension(format!(
                "{} layers for num_layers={}",
                self.layers.len(),
                cfg.num_layers
            )));
        }
        for layer in &self.layers {
            if layer.router.w_router.shape() != (cfg.num_experts, d)
                || layer.experts.len() != cfg.num_experts
            {
                return Err(Error::Dimension("router or expert count".into()));
            }
            for e in &layer.experts {
                e.check(d)?;
                if e.channel_ids.iter().any(|&id| id >= cfg.d_inter) {
                    return Err(Error::Dimension("channel id beyond d_inter".into()));
                }
            }
        }
        if !self.param_slices().iter().all(|s| s.iter().all(|x| x.is_finite())) {
            return Err(Error::Data("non-finite weight".into()));
        }
        Ok(())
    }

    /// Current total of atomic experts across all layers.
    pub fn num_atomic_experts(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.experts)
            .map(ExpertWeights::channels)
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Parameters held by MoE experts (router excluded).
    pub fn num_expert_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.experts)
            .map(|e| 3 * e.channels() * e.d_model())
            .sum()
    }

    /// Flat views of all parameters in canonical order: embedding, then per
    /// layer the router followed by each expert's up, gate and down
    /// projections, then the head. [`ModelGrads::param_slices`] uses the
    /// same order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.token_embedding.data()];
        for layer in &self.layers {
            out.push(layer.router.w_router.data());
            for e in &layer.experts {
                out.push(e.w_up.data());
                out.push(e.w_gate.data());
                out.push(e.w_down.data());
            }
        }
        out.push(self.output_head.data());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.token_embedding.data_mut()];
        for layer in &mut self.layers {
            out.push(layer.router.w_router.data_mut());
            for e in &mut layer.experts {
                out.push(e.w_up.data_mut());
                out.push(e.w_gate.data_mut());
                out.push(e.w_down.data_mut());
            }
        }
        out.push(self.output_head.data_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(MoEConfig::default().validate().is_ok());
        let bad = MoEConfig {
            kappa: 9,
            ..MoEConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MoEConfig {
            d_inter: 0,
            ..MoEConfig::default()
        };
        assert!(init_model(&bad).is_err());
        assert_eq!(MoEConfig::default().num_atomic_experts(), 256);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = MoEConfig::default();
        assert_eq!(init_model(&cfg).unwrap(), init_model(&cfg).unwrap());
        let other = MoEConfig { seed: 1, ..cfg.clone() };
        assert_ne!(init_model(&cfg).unwrap(), init_model(&other).unwrap());
    }

    #[test]
    fn init_scale_matches_uniform_moment() {
        let cfg = MoEConfig {
            d_model: 64,
            ..MoEConfig::default()
        };
        let m = init_model(&cfg).unwrap();
        let w: Vec<f64> = m.layers.iter().flat_map(|l| &l.experts).flat_map(|e| e.w_up.data().to_vec()).collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let want = 1.0 / (3.0 * 64.0f64).sqrt();
        assert!((sd - want).abs() / want < 0.2, "sd={sd} want={want}");
        m.validate().unwrap();
    }

    #[test]
    fn param_views_line_up_with_shapes() {
        let m = init_model(&MoEConfig::default()).unwrap();
        assert_eq!(m.param_slices().len(), 1 + 2 * (1 + 8 * 3) + 1);
        assert_eq!(m.num_expert_params(), 2 * 8 * 3 * 16 * 32);
    }
}
