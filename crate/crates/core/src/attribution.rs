//! Inter-layer integrated attribution of neuron sets.
//!
//! Both scores interpolate every selected activation jointly from 0 to its
//! observed value `w~` in `m` Riemann frames. At frame `k` each selected
//! neuron is pinned to `(k/m) w~` and the gradient of the target with respect
//! to each selected activation is read off the pinned forward pass:
//!
//! ```text
//! IGI = sum_n w~_n * (1/m) sum_k sum_l  dF/dw_l        F = p(y_1 | x)
//! IFI = sum_n z~_n * (1/m) sum_k sum_l (dG/dz_l)^2     G = mean_i log p(y_i | x, y_<i)
//! ```
//!
//! Neurons that are not selected are recomputed normally at every frame.

use serde::{Deserialize, Serialize};

use crate::datagen::Example;
use crate::diffcore::{log_softmax_rows, Tensor};
use crate::error::{Error, Result};
use crate::model::{
    build_graph, forward_traced, ActivationOverride, Branch, ModelParams, NeuronRef, Row,
};

/// Rows per batched forward/backward pass.
const MAX_BATCH_ROWS: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// Riemann frames `m`.
    pub steps: usize,
    /// Layers that may carry selected neurons; `None` means the full branch.
    #[serde(default)]
    pub layer_horizon: Option<usize>,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            layer_horizon: None,
        }
    }
}

impl AttributionConfig {
    pub fn horizon(&self, params: &ModelParams, branch: Branch) -> Result<usize> {
        let depth = params.config.depth(branch);
        match self.layer_horizon {
            None => Ok(depth),
            Some(n) if n >= 1 && n <= depth => Ok(n),
            Some(n) => Err(Error::InvalidConfig(format!(
                "layer horizon {n} outside 1..={depth} for the {branch} branch"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionScore {
    pub value: f64,
    /// Contribution of the selected neurons of each layer `1..=N`.
    pub breakdown: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Target {
    /// Probability of the first answer token, plain gradients.
    Probability,
    /// Mean answer log-likelihood, squared gradients.
    LogLikelihood,
}

impl Target {
    fn branch(self) -> Branch {
        match self {
            Target::Probability => Branch::Textual,
            Target::LogLikelihood => Branch::Visual,
        }
    }
}

/// Gradient-integrated score of textual neurons.
pub fn igi(
    params: &ModelParams,
    example: &Example,
    neurons: &[NeuronRef],
    cfg: &AttributionConfig,
) -> Result<AttributionScore> {
    Ok(score_sets(params, example, &[neurons.to_vec()], cfg, Target::Probability)?.remove(0))
}

/// Fisher-integrated score of visual neurons on a multimodal example.
pub fn ifi(
    params: &ModelParams,
    example: &Example,
    neurons: &[NeuronRef],
    cfg: &AttributionConfig,
) -> Result<AttributionScore> {
    Ok(score_sets(params, example, &[neurons.to_vec()], cfg, Target::LogLikelihood)?.remove(0))
}

/// Score several candidate sets against the same example in batched passes.
pub(crate) fn score_sets(
    params: &ModelParams,
    example: &Example,
    sets: &[Vec<NeuronRef>],
    cfg: &AttributionConfig,
    target: Target,
) -> Result<Vec<AttributionScore>> {
    let branch = target.branch();
    let horizon = cfg.horizon(params, branch)?;
    if cfg.steps == 0 {
        return Err(Error::InvalidConfig("attribution needs at least one frame".into()));
    }
    if target == Target::LogLikelihood && !example.is_multimodal() {
        return Err(Error::InvalidConfig(format!(
            "example {} is text-only; visual attribution needs an image",
            example.id
        )));
    }
    for set in sets {
        if set.is_empty() {
            return Err(Error::EmptyInput("no neurons selected for attribution".into()));
        }
        for n in set {
            if n.branch != branch {
                return Err(Error::InvalidNeuron(format!(
                    "{n} passed to {} attribution",
                    match target {
                        Target::Probability => "gradient-integrated (textual)",
                        Target::LogLikelihood => "Fisher-integrated (visual)",
                    }
                )));
            }
            params.config.check_neuron(n)?;
            if n.layer > horizon {
                return Err(Error::LayerOutOfRange {
                    layer: n.layer,
                    max: horizon,
                });
            }
        }
    }

    let base = forward_traced(params, example, None)?;
    let m = cfg.steps;
    let positions = match target {
        Target::Probability => 1,
        Target::LogLikelihood => example.answer_tokens.len(),
    };
    let rows_per_set = m * positions;
    let sets_per_chunk = (MAX_BATCH_ROWS / rows_per_set).max(1);

    let mut out = Vec::with_capacity(sets.len());
    for chunk in sets.chunks(sets_per_chunk) {
        let mut rows = Vec::with_capacity(chunk.len() * rows_per_set);
        let mut overrides = Vec::with_capacity(rows.capacity());
        for set in chunk {
            for k in 0..m {
                // midpoint frames: error falls as 1/m^2 instead of 1/m
                let frac = (k as f64 + 0.5) / m as f64;
                let mut ov = ActivationOverride::new();
                for n in set {
                    ov.pin(*n, frac * base.activation(n));
                }
                for p in 0..positions {
                    rows.push(Row::from_example(example, p));
                    overrides.push(ov.clone());
                }
            }
        }

        let mg = build_graph(params, &rows, &overrides)?;
        let ev = mg.forward()?;
        let log_probs = log_softmax_rows(ev.value(mg.logits));
        let seed = output_seed(&log_probs, example, positions, target);

        let mut layers: Vec<usize> = chunk.iter().flatten().map(|n| n.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        let nodes: Vec<_> = layers
            .iter()
            .map(|&l| mg.act_node(branch, l).expect("branch present in batch"))
            .collect();
        let grads = mg.graph.grad_seeded(&ev, mg.logits, &seed, &nodes)?;
        let grad_of = |layer: usize| &grads[layers.binary_search(&layer).unwrap()];

        for (s, set) in chunk.iter().enumerate() {
            // (1/m) sum_k sum_l term_{k,l}
            let mut integral = 0.0;
            for k in 0..m {
                let first_row = s * rows_per_set + k * positions;
                for n in set {
                    let g = grad_of(n.layer);
                    let d: f64 = (0..positions).map(|p| g.get(first_row + p, n.index)).sum();
                    integral += match target {
                        Target::Probability => d,
                        Target::LogLikelihood => d * d,
                    };
                }
            }
            integral /= m as f64;
            let mut breakdown = vec![0.0; horizon];
            for n in set {
                breakdown[n.layer - 1] += base.activation(n) * integral;
            }
            out.push(AttributionScore {
                value: breakdown.iter().sum(),
                breakdown,
            });
        }
    }
    Ok(out)
}

/// Gradient of the per-row target with respect to the logits.
fn output_seed(log_probs: &Tensor, example: &Example, positions: usize, target: Target) -> Tensor {
    let mut seed = Tensor::zeros(log_probs.rows(), log_probs.cols());
    for r in 0..log_probs.rows() {
        let p = r % positions;
        let y = example.answer_tokens[p];
        let lp = log_probs.row_slice(r);
        let out = seed.row_slice_mut(r);
        match target {
            // d p_y / d logits = p_y (onehot_y - p)
            Target::Probability => {
                let py = lp[y].exp();
                for (c, o) in out.iter_mut().enumerate() {
                    *o = py * (f64::from(u8::from(c == y)) - lp[c].exp());
                }
            }
            // d (1/P) log p_y / d logits = (onehot_y - p) / P
            Target::LogLikelihood => {
                let w = 1.0 / positions as f64;
                for (c, o) in out.iter_mut().enumerate() {
                    *o = w * (f64::from(u8::from(c == y)) - lp[c].exp());
                }
            }
        }
    }
    seed
}
