//! Pruning of located neurons and representation-misdirection editing.
//!
//! Pruning zeroes a neuron's incoming column, bias and outgoing row, so its
//! activation is exactly zero for every input. Editing then trains only those
//! slices so that forget-set hidden states at one textual layer move towards
//! `lambda * |h_frozen| * u` for a fixed random unit vector `u`, while retain-set
//! hidden states stay at their frozen values.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::Example;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{build_graph, nll_and_grads, ModelParams, NeuronRef, ParamMask, Row};
use crate::optim::{clip_grad_norm, Sgd};
use crate::pathfinder::PruneSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    /// Target-norm scale of the misdirection target.
    pub lambda: f64,
    /// Weight of the retain term.
    pub gamma: f64,
    /// Textual layer whose hidden state is steered; `None` means the last one.
    #[serde(default)]
    pub rmisu_layer: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling per step; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub rng_seed: u64,
    /// Neurons kept per (branch, layer) when aggregating paths.
    pub top_k: usize,
    /// Add answer cross-entropy on the retain chunk to every step.
    #[serde(default)]
    pub retain_ce: bool,
    /// Draw a fresh direction for each forget example instead of one shared `u`.
    #[serde(default)]
    pub per_example_direction: bool,
    /// Re-draw the incoming weights of pruned neurons before editing (their
    /// outgoing rows stay zero). A zeroed ReLU unit has zero gradient
    /// everywhere and could never be edited otherwise.
    #[serde(default = "yes")]
    pub reinit_pruned: bool,
}

fn yes() -> bool {
    true
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            lambda: 6.5,
            gamma: 100.0,
            rmisu_layer: None,
            epochs: 40,
            lr: 0.02,
            momentum: 0.9,
            clip_norm: Some(10.0),
            rng_seed: 7,
            top_k: 4,
            retain_ce: false,
            per_example_direction: false,
            reinit_pruned: true,
        }
    }
}

impl UnlearnConfig {
    pub fn layer(&self, params: &ModelParams) -> Result<usize> {
        let max = params.config.num_text_layers;
        let l = self.rmisu_layer.unwrap_or(max);
        if l < 1 || l > max {
            return Err(Error::LayerOutOfRange { layer: l, max });
        }
        Ok(l)
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.top_k == 0 || self.top_k > params.config.hidden_dim {
            return Err(Error::InvalidConfig(format!(
                "top_k must lie in 1..={}, got {}",
                params.config.hidden_dim, self.top_k
            )));
        }
        self.layer(params).map(|_| ())
    }
}

/// Neurons zeroed by [`prune`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub neurons: BTreeSet<NeuronRef>,
    pub origin: PruneSet,
}

impl PruneMask {
    pub fn contains(&self, n: &NeuronRef) -> bool {
        self.neurons.contains(n)
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn param_mask(&self, params: &ModelParams) -> ParamMask {
        params.neuron_mask(&self.neurons)
    }
}

/// Zero the parameters feeding and leaving every neuron in `prune_set`.
pub fn prune(params: &ModelParams, prune_set: &PruneSet) -> Result<(ModelParams, PruneMask)> {
    let neurons: BTreeSet<NeuronRef> = prune_set.neurons().into_iter().collect();
    for n in &neurons {
        params.config.check_neuron(n)?;
    }
    let mut out = params.clone();
    zero_neurons(&mut out, &neurons);
    Ok((
        out,
        PruneMask {
            neurons,
            origin: prune_set.clone(),
        },
    ))
}

pub(crate) fn zero_neurons<'a>(params: &mut ModelParams, neurons: impl IntoIterator<Item = &'a NeuronRef>) {
    let h = params.config.hidden_dim;
    for n in neurons {
        let block = params.block_mut(n.branch, n.layer);
        let dim = block.w_up.rows();
        for r in 0..dim {
            block.w_up.data_mut()[r * h + n.index] = 0.0;
        }
        block.b_up.data_mut()[n.index] = 0.0;
        block.w_down.row_slice_mut(n.index).fill(0.0);
    }
}

/// Uniform direction on the unit sphere: a normalized standard-normal draw.
pub fn sample_unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    assert!(dim >= 1, "unit vector needs dim >= 1");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Hidden states after textual layer `layer` for a batch of question rows.
pub(crate) fn hidden_batch(params: &ModelParams, examples: &[Example], layer: usize) -> Result<Tensor> {
    let rows: Vec<Row> = examples.iter().map(|e| Row::from_example(e, 0)).collect();
    let mg = build_graph(params, &rows, &[])?;
    let ev = mg.forward()?;
    Ok(ev.value(mg.hidden[layer - 1]).clone())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `lambda * |h_frozen(x)| * u`.
fn misdirection_target(frozen_h: &[f64], u: &[f64], lambda: f64) -> Vec<f64> {
    let norm = frozen_h.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter().map(|c| lambda * norm * c).collect()
}

/// `|h_edited(x_f) - lambda |h_frozen(x_f)| u|^2` at the configured layer.
pub fn rmisu_forget_loss(
    edited: &ModelParams,
    frozen: &ModelParams,
    x_f: &Example,
    u: &[f64],
    cfg: &UnlearnConfig,
) -> Result<f64> {
    let l = cfg.layer(edited)?;
    if u.len() != edited.config.embed_dim {
        return Err(Error::InvalidConfig(format!(
            "direction has {} entries, hidden states have {}",
            u.len(),
            edited.config.embed_dim
        )));
    }
    let h = hidden_batch(edited, std::slice::from_ref(x_f), l)?;
    let h0 = hidden_batch(frozen, std::slice::from_ref(x_f), l)?;
    Ok(sq_dist(h.data(), &misdirection_target(h0.data(), u, cfg.lambda)))
}

/// `|h_edited(x_r) - h_frozen(x_r)|^2` at the configured layer.
pub fn rmisu_retain_loss(
    edited: &ModelParams,
    frozen: &ModelParams,
    x_r: &Example,
    cfg: &UnlearnConfig,
) -> Result<f64> {
    let l = cfg.layer(edited)?;
    let h = hidden_batch(edited, std::slice::from_ref(x_r), l)?;
    let h0 = hidden_batch(frozen, std::slice::from_ref(x_r), l)?;
    Ok(sq_dist(h.data(), h0.data()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub forget_loss: f64,
    pub retain_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditLog {
    /// Mean step losses per epoch.
    pub epochs: Vec<EpochLoss>,
    /// Losses of every step, in order.
    pub steps: Vec<EpochLoss>,
}

impl EditLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,forget_loss,retain_loss,total\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.10e},{:.10e},{:.10e}\n",
                e.epoch, e.forget_loss, e.retain_loss, e.total
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Mean squared distance of a batch of hidden states to fixed targets, and
/// its gradient for every parameter (restricted to `mask` by the caller).
fn rep_loss_and_grads(
    params: &ModelParams,
    examples: &[Example],
    targets: &Tensor,
    layer: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let rows: Vec<Row> = examples.iter().map(|e| Row::from_example(e, 0)).collect();
    let mut mg = build_graph(params, &rows, &[])?;
    let t = mg.graph.constant(targets.clone());
    let d = mg.graph.squared_distance(mg.hidden[layer - 1], t);
    let loss = mg.graph.scale(d, Tensor::scalar(1.0 / examples.len() as f64));
    let ev = mg.forward()?;
    let grads = mg.graph.grad(&ev, loss, &mg.param_nodes)?;
    Ok((ev.value(loss).item(), grads))
}

/// Shared editing loop. `mask = None` trains every parameter.
pub(crate) fn rmisu_train(
    start: &ModelParams,
    frozen: &ModelParams,
    mask: Option<&ParamMask>,
    d_f: &[Example],
    d_r: &[Example],
    cfg: &UnlearnConfig,
) -> Result<(ModelParams, EditLog)> {
    cfg.validate(start)?;
    let layer = cfg.layer(start)?;
    if d_f.is_empty() || d_r.is_empty() {
        return Err(Error::EmptyInput("editing needs forget and retain examples".into()));
    }
    let mut params = start.clone();
    let mut log = EditLog::default();
    if cfg.epochs == 0 {
        return Ok((params, log));
    }

    let dim = start.config.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let shared_u = sample_unit_vector(dim, &mut rng);
    let frozen_f = hidden_batch(frozen, d_f, layer)?;
    let mut forget_targets = Tensor::zeros(d_f.len(), dim);
    for r in 0..d_f.len() {
        let u = if cfg.per_example_direction {
            sample_unit_vector(dim, &mut rng)
        } else {
            shared_u.clone()
        };
        forget_targets
            .row_slice_mut(r)
            .copy_from_slice(&misdirection_target(frozen_f.row_slice(r), &u, cfg.lambda));
    }
    let frozen_r = hidden_batch(frozen, d_r, layer)?;

    let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..d_r.len()).collect();
    let chunk = d_f.len().min(d_r.len());
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut n_steps = 0;
        for idx in order.chunks(chunk) {
            let retain: Vec<Example> = idx.iter().map(|&i| d_r[i].clone()).collect();
            let mut retain_targets = Tensor::zeros(idx.len(), dim);
            for (r, &i) in idx.iter().enumerate() {
                retain_targets.row_slice_mut(r).copy_from_slice(frozen_r.row_slice(i));
            }
            let (lf, gf) = rep_loss_and_grads(&params, d_f, &forget_targets, layer)?;
            let (lr, gr) = rep_loss_and_grads(&params, &retain, &retain_targets, layer)?;
            let mut total = lf + cfg.gamma * lr;
            let mut grads: Vec<Tensor> = gf
                .into_iter()
                .zip(&gr)
                .map(|(mut a, b)| {
                    a.data_mut()
                        .iter_mut()
                        .zip(b.data())
                        .for_each(|(x, y)| *x += cfg.gamma * y);
                    a
                })
                .collect();
            if cfg.retain_ce {
                let (ce, gce) = nll_and_grads(&params, &retain)?;
                total += ce;
                for (a, b) in grads.iter_mut().zip(&gce) {
                    a.add_assign(b);
                }
            }
            if !total.is_finite() {
                return Err(Error::Divergence {
                    stage: "edit",
                    step,
                    loss: total,
                });
            }
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            opt.step(&mut params, &grads, mask);
            if !params.all_finite() {
                return Err(Error::Divergence {
                    stage: "edit",
                    step,
                    loss: f64::NAN,
                });
            }
            log.steps.push(EpochLoss {
                epoch,
                forget_loss: lf,
                retain_loss: lr,
                total,
            });
            sums.0 += lf;
            sums.1 += lr;
            sums.2 += total;
            n_steps += 1;
            step += 1;
        }
        let k = n_steps as f64;
        log.epochs.push(EpochLoss {
            epoch,
            forget_loss: sums.0 / k,
            retain_loss: sums.1 / k,
            total: sums.2 / k,
        });
    }
    Ok((params, log))
}

/// Edit only the parameters of masked neurons.
pub fn rmisu_edit(
    pruned: &ModelParams,
    frozen: &ModelParams,
    mask: &PruneMask,
    d_f: &[Example],
    d_r: &[Example],
    cfg: &UnlearnConfig,
) -> Result<(ModelParams, EditLog)> {
    if mask.is_empty() {
        return Err(Error::EmptyInput("editing mask is empty".into()));
    }
    if cfg.epochs == 0 {
        return Ok((pruned.clone(), EditLog::default()));
    }
    let mut start = pruned.clone();
    if cfg.reinit_pruned {
        reinit_incoming(&mut start, &mask.neurons, cfg.rng_seed);
    }
    let pm = mask.param_mask(&start);
    rmisu_train(&start, frozen, Some(&pm), d_f, d_r, cfg)
}

/// Fresh incoming column and bias for each neuron, uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; the outgoing row is left untouched.
pub(crate) fn reinit_incoming(params: &mut ModelParams, neurons: &BTreeSet<NeuronRef>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ed17);
    let h = params.config.hidden_dim;
    for n in neurons {
        let block = params.block_mut(n.branch, n.layer);
        let dim = block.w_up.rows();
        let bound = 1.0 / (dim as f64).sqrt();
        for r in 0..dim {
            block.w_up.data_mut()[r * h + n.index] = rng.random_range(-bound..=bound);
        }
        block.b_up.data_mut()[n.index] = rng.random_range(-bound..=bound);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, split, CorpusConfig, SplitSpec};
    use crate::model::{forward_traced, hidden_rep, Branch, ModelConfig};

    fn setup() -> (ModelParams, Vec<Example>, Vec<Example>) {
        let cfg = ModelConfig {
            vocab_size: 48,
            embed_dim: 8,
            visual_input_dim: 6,
            hidden_dim: 6,
            num_text_layers: 3,
            num_visual_layers: 2,
            answer_classes: 16,
            fusion_layer: 1,
            seed: 5,
        };
        let corpus = generate_corpus(
            &CorpusConfig {
                num_entities: 10,
                qa_per_entity: 4,
                seed: 2,
            },
            &cfg,
        )
        .unwrap();
        let s = split(&corpus, &SplitSpec { forget_ratio: 0.2, seed: 1 }).unwrap();
        (ModelParams::init(&cfg).unwrap(), s.forget, s.retain)
    }

    fn some_set(p: &ModelParams) -> PruneSet {
        PruneSet::from_neurons(
            &[
                NeuronRef::textual(1, 0),
                NeuronRef::textual(2, 3),
                NeuronRef::visual(1, 2),
                NeuronRef::visual(2, 5),
            ],
            p,
        )
    }

    #[test]
    fn empty_prune_is_identity() {
        let (p, _, _) = setup();
        let (q, m) = prune(&p, &PruneSet::empty()).unwrap();
        assert_eq!(p, q);
        assert!(m.is_empty());
    }

    #[test]
    fn pruned_activations_are_zero_and_prune_is_idempotent() {
        let (p, f, r) = setup();
        let (q, mask) = prune(&p, &some_set(&p)).unwrap();
        for e in f.iter().chain(&r) {
            let t = forward_traced(&q, e, None).unwrap();
            for n in &mask.neurons {
                assert_eq!(t.activation(n), 0.0);
            }
        }
        let (q2, _) = prune(&q, &some_set(&p)).unwrap();
        assert_eq!(q, q2);
    }

    #[test]
    fn pruning_everything_gives_bias_only_network() {
        let (p, f, _) = setup();
        let all = PruneSet::from_neurons(&p.config.all_neurons(), &p);
        let (q, _) = prune(&p, &all).unwrap();
        let mut bias_only = p.clone();
        for b in bias_only.visual.iter_mut().chain(bias_only.textual.iter_mut()) {
            b.w_down.data_mut().fill(0.0);
        }
        for e in &f {
            assert_eq!(
                forward_traced(&q, e, None).unwrap().logits,
                forward_traced(&bias_only, e, None).unwrap().logits
            );
        }
    }

    #[test]
    fn prune_rejects_bad_index() {
        let (p, _, _) = setup();
        let mut ps = PruneSet::empty();
        ps.entries.insert(Branch::Textual, vec![vec![6], vec![], vec![]]);
        assert!(prune(&p, &ps).is_err());
    }

    #[test]
    fn unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let u = sample_unit_vector(1, &mut rng);
            assert!(u[0] == 1.0 || u[0] == -1.0);
            let u = sample_unit_vector(16, &mut rng);
            let n: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forget_loss_special_cases() {
        let (p, f, _) = setup();
        let cfg = UnlearnConfig {
            lambda: 0.0,
            ..UnlearnConfig::default()
        };
        let e = &f[0];
        let l = cfg.layer(&p).unwrap();
        let h = hidden_rep(&p, e, l).unwrap();
        let u = vec![0.0; 8];
        let loss = rmisu_forget_loss(&p, &p, e, &u, &cfg).unwrap();
        assert!((loss - h.iter().map(|v| v * v).sum::<f64>()).abs() < 1e-12);

        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: Vec<f64> = h.iter().map(|v| v / norm).collect();
        let cfg = UnlearnConfig {
            lambda: 1.0,
            ..UnlearnConfig::default()
        };
        assert!(rmisu_forget_loss(&p, &p, e, &u, &cfg).unwrap() < 1e-24);
    }

    #[test]
    fn retain_loss_zero_and_symmetric() {
        let (p, _, r) = setup();
        let cfg = UnlearnConfig::default();
        assert_eq!(rmisu_retain_loss(&p, &p, &r[0], &cfg).unwrap(), 0.0);
        let (q, _) = prune(&p, &some_set(&p)).unwrap();
        let a = rmisu_retain_loss(&p, &q, &r[0], &cfg).unwrap();
        let b = rmisu_retain_loss(&q, &p, &r[0], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn edit_respects_freeze_and_loss_composition() {
        let (p, f, r) = setup();
        let (q, mask) = prune(&p, &some_set(&p)).unwrap();
        let cfg = UnlearnConfig {
            epochs: 2,
            gamma: 0.7,
            top_k: 2,
            ..UnlearnConfig::default()
        };
        let (e, log) = rmisu_edit(&q, &p, &mask, &f, &r, &cfg).unwrap();
        let pm = mask.param_mask(&q);
        for ((a, b), m) in q.tensors().iter().zip(e.tensors()).zip(&pm.masks) {
            for ((x, y), keep) in a.1.data().iter().zip(b.1.data()).zip(m) {
                if !keep {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        assert_ne!(q, e);
        for s in &log.steps {
            assert!((s.total - (s.forget_loss + 0.7 * s.retain_loss)).abs() <= 1e-9);
        }
        assert_eq!(log.epochs.len(), 2);
    }

    #[test]
    fn zero_epochs_unchanged() {
        let (p, f, r) = setup();
        let (q, mask) = prune(&p, &some_set(&p)).unwrap();
        let cfg = UnlearnConfig {
            epochs: 0,
            top_k: 2,
            ..UnlearnConfig::default()
        };
        assert_eq!(rmisu_edit(&q, &p, &mask, &f, &r, &cfg).unwrap().0, q);
    }

    #[test]
    fn config_validation() {
        let (p, _, _) = setup();
        let bad = UnlearnConfig {
            gamma: 0.0,
            top_k: 2,
            ..UnlearnConfig::default()
        };
        assert!(bad.validate(&p).is_err());
        let bad = UnlearnConfig {
            rmisu_layer: Some(4),
            top_k: 2,
            ..UnlearnConfig::default()
        };
        assert!(matches!(bad.validate(&p), Err(Error::LayerOutOfRange { .. })));
    }
}
