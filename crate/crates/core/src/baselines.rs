//! Comparison unlearning methods and ablations of the path editor.
//!
//! `L(D)` below is the mean answer NLL over `D` (summed over answer
//! positions). Fine-tuning methods share the editor's schedule: one step sees
//! the whole forget set plus one same-size retain chunk, an epoch is one pass
//! over the retain set.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Example;
use crate::diffcore::{log_softmax_rows, Evaluation, Tensor};
use crate::editor::{prune, reinit_incoming, rmisu_edit, rmisu_train, PruneMask, UnlearnConfig};
use crate::error::{Error, Result};
use crate::model::{
    build_graph, forward_rows, nll_and_grads, teacher_forced_rows, train, Branch, ModelGraph,
    ModelParams, NeuronRef, ParamMask, Row, TrainConfig,
};
use crate::optim::{clip_grad_norm, Sgd};
use crate::pathfinder::{aggregate, ExamplePaths, PruneSet};

/// Denominator guard in the MANU importance ratio.
pub const MANU_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MipEditor,
    GaDiff,
    KlMin,
    Npo,
    Manu,
    OursIgiOnly,
    OursIfiOnly,
    OursPathResidual,
    OursNoEdit,
    OursFtInsteadOfRmisu,
    RmisuFullModel,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::MipEditor,
        Method::GaDiff,
        Method::KlMin,
        Method::Npo,
        Method::Manu,
        Method::OursIgiOnly,
        Method::OursIfiOnly,
        Method::OursPathResidual,
        Method::OursNoEdit,
        Method::OursFtInsteadOfRmisu,
        Method::RmisuFullModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::MipEditor => "mip_editor",
            Method::GaDiff => "ga_diff",
            Method::KlMin => "kl_min",
            Method::Npo => "npo",
            Method::Manu => "manu",
            Method::OursIgiOnly => "ours_igi_only",
            Method::OursIfiOnly => "ours_ifi_only",
            Method::OursPathResidual => "ours_path_residual",
            Method::OursNoEdit => "ours_no_edit",
            Method::OursFtInsteadOfRmisu => "ours_ft_instead_of_rmisu",
            Method::RmisuFullModel => "rmisu_full_model",
        }
    }

    /// Whether the method consumes located paths.
    pub fn needs_paths(self) -> bool {
        matches!(
            self,
            Method::MipEditor
                | Method::OursIgiOnly
                | Method::OursIfiOnly
                | Method::OursNoEdit
                | Method::OursFtInsteadOfRmisu
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidConfig(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: Method,
    /// NPO inverse temperature.
    pub beta: f64,
    /// Percentage of all neurons MANU prunes.
    pub alpha_pct: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            method: Method::MipEditor,
            beta: 0.4,
            alpha_pct: 12.5,
            epochs: 4,
            lr: 0.02,
            momentum: 0.9,
            clip_norm: Some(10.0),
            seed: 7,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.alpha_pct > 0.0 && self.alpha_pct < 100.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha_pct must lie in (0, 100), got {}",
                self.alpha_pct
            )));
        }
        Ok(())
    }
}

/// Teacher-forced forward pass whose backward is seeded on the logits.
struct TeacherForced {
    mg: ModelGraph,
    ev: Evaluation,
    log_probs: Tensor,
    targets: Vec<usize>,
    owner: Vec<usize>,
}

impl TeacherForced {
    fn run(params: &ModelParams, examples: &[Example]) -> Result<Self> {
        let (rows, targets, owner) = teacher_forced_rows(examples);
        let mg = build_graph(params, &rows, &[])?;
        let ev = mg.forward()?;
        let log_probs = log_softmax_rows(ev.value(mg.logits));
        Ok(Self {
            mg,
            ev,
            log_probs,
            targets,
            owner,
        })
    }

    /// Sequence log-probability `sum_i log p(y_i | x, y_<i)` per example.
    fn sequence_log_probs(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (r, (&t, &i)) in self.targets.iter().zip(&self.owner).enumerate() {
            out[i] += self.log_probs.get(r, t);
        }
        out
    }

    /// `d log p(y_r) / d logits_r = onehot - p`, scaled per row.
    fn log_prob_seed(&self, scale: impl Fn(usize) -> f64) -> Tensor {
        let mut seed = Tensor::zeros(self.log_probs.rows(), self.log_probs.cols());
        for r in 0..seed.rows() {
            let s = scale(self.owner[r]);
            let t = self.targets[r];
            let lp = self.log_probs.row_slice(r);
            for (c, o) in seed.row_slice_mut(r).iter_mut().enumerate() {
                *o = s * (f64::from(u8::from(c == t)) - lp[c].exp());
            }
        }
        seed
    }

    fn backward(&self, seed: &Tensor) -> Result<Vec<Tensor>> {
        self.mg
            .graph
            .grad_seeded(&self.ev, self.mg.logits, seed, &self.mg.param_nodes)
    }
}

fn mean_nll(params: &ModelParams, examples: &[Example]) -> Result<f64> {
    Ok(nll_and_grads(params, examples)?.0)
}

/// `L(D^f) - L(D^r)`.
pub fn ga_diff_loss(params: &ModelParams, d_f: &[Example], d_r: &[Example]) -> Result<f64> {
    Ok(mean_nll(params, d_f)? - mean_nll(params, d_r)?)
}

/// `KL(p || q) = sum_c p_c ln(p_c / q_c)`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pc, _)| **pc > 0.0)
        .map(|(pc, qc)| pc * (pc / qc).ln())
        .sum()
}

/// Mean per-position `KL(frozen || current)` on `examples`.
pub fn kl_term(params: &ModelParams, frozen: &ModelParams, examples: &[Example]) -> Result<f64> {
    let cur = TeacherForced::run(params, examples)?;
    let old = TeacherForced::run(frozen, examples)?;
    Ok(kl_from_log_probs(&old.log_probs, &cur.log_probs, &cur.owner, examples))
}

fn kl_from_log_probs(old: &Tensor, cur: &Tensor, owner: &[usize], examples: &[Example]) -> f64 {
    let n = examples.len() as f64;
    let mut total = 0.0;
    for r in 0..cur.rows() {
        // log domain: a vanishing current probability stays finite
        let kl: f64 = old
            .row_slice(r)
            .iter()
            .zip(cur.row_slice(r))
            .map(|(lp, lq)| lp.exp() * (lp - lq))
            .sum();
        let positions = examples[owner[r]].answer_tokens.len() as f64;
        total += kl / positions / n;
    }
    total
}

/// `-L(D^f) + KL(D^f)`.
pub fn kl_min_loss(params: &ModelParams, frozen: &ModelParams, d_f: &[Example]) -> Result<f64> {
    Ok(-mean_nll(params, d_f)? + kl_term(params, frozen, d_f)?)
}

/// `(2/beta) ln(1 + ratio^beta)` for one example.
pub fn npo_term(ratio: f64, beta: f64) -> f64 {
    2.0 / beta * (1.0 + ratio.powf(beta)).ln()
}

/// Mean NPO loss with `pi` the sequence probability of the gold answer.
pub fn npo_loss(params: &ModelParams, reference: &ModelParams, d_f: &[Example], beta: f64) -> Result<f64> {
    let cur = TeacherForced::run(params, d_f)?.sequence_log_probs(d_f.len());
    let refp = TeacherForced::run(reference, d_f)?.sequence_log_probs(d_f.len());
    let n = d_f.len() as f64;
    Ok(cur
        .iter()
        .zip(&refp)
        .map(|(c, r)| npo_term((c - r).exp(), beta))
        .sum::<f64>()
        / n)
}

/// A logged optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Shared fine-tuning loop. `step_fn(params, forget, retain_chunk)` returns
/// the reported loss and the descent direction.
fn finetune(
    start: &ModelParams,
    mask: Option<&ParamMask>,
    d_f: &[Example],
    d_r: &[Example],
    cfg: &BaselineConfig,
    stage: &'static str,
    mut step_fn: impl FnMut(&ModelParams, &[Example], &[Example]) -> Result<(f64, Vec<Tensor>)>,
) -> Result<(ModelParams, Vec<StepLoss>)> {
    if d_f.is_empty() || d_r.is_empty() {
        return Err(Error::EmptyInput("unlearning needs forget and retain examples".into()));
    }
    let mut params = start.clone();
    let mut log = Vec::new();
    let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..d_r.len()).collect();
    let chunk = d_f.len().min(d_r.len());
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(chunk) {
            let retain: Vec<Example> = idx.iter().map(|&i| d_r[i].clone()).collect();
            let (loss, mut grads) = step_fn(&params, d_f, &retain)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { stage, step, loss });
            }
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            opt.step(&mut params, &grads, mask);
            if !params.all_finite() {
                return Err(Error::Divergence {
                    stage,
                    step,
                    loss: f64::NAN,
                });
            }
            log.push(StepLoss { step, epoch, loss });
            step += 1;
        }
    }
    Ok((params, log))
}

fn combine(a: Vec<Tensor>, b: &[Tensor], wb: f64) -> Vec<Tensor> {
    a.into_iter()
        .zip(b)
        .map(|(mut x, y)| {
            x.data_mut()
                .iter_mut()
                .zip(y.data())
                .for_each(|(u, v)| *u += wb * v);
            x
        })
        .collect()
}

/// Gradient ascent on `L(D^f) - L(D^r)`: forget NLL goes up, retain NLL down.
pub fn ga_diff(
    params: &ModelParams,
    d_f: &[Example],
    d_r: &[Example],
    cfg: &BaselineConfig,
) -> Result<(ModelParams, Vec<StepLoss>)> {
    finetune(params, None, d_f, d_r, cfg, "ga_diff", |p, f, r| {
        let (lf, gf) = nll_and_grads(p, f)?;
        let (lr, gr) = nll_and_grads(p, r)?;
        // descent direction of -(L_f - L_r)
        let grads = combine(gf.into_iter().map(|mut g| {
            g.data_mut().iter_mut().for_each(|v| *v = -*v);
            g
        }).collect(), &gr, 1.0);
        Ok((lf - lr, grads))
    })
}

/// Minimizes `-L(D^f) + KL(frozen || current)` on the forget set.
pub fn kl_min(
    params: &ModelParams,
    frozen: &ModelParams,
    d_f: &[Example],
    d_r: &[Example],
    cfg: &BaselineConfig,
) -> Result<(ModelParams, Vec<StepLoss>)> {
    let old = TeacherForced::run(frozen, d_f)?.log_probs;
    finetune(params, None, d_f, d_r, cfg, "kl_min", |p, f, _| {
        let tf = TeacherForced::run(p, f)?;
        let n = f.len() as f64;
        let nll = -tf.sequence_log_probs(f.len()).iter().sum::<f64>() / n;
        let kl = kl_from_log_probs(&old, &tf.log_probs, &tf.owner, f);
        // d(-L)/dlogits = (onehot - p)/n ; dKL/dlogits = (p - p_old)/(P n)
        let mut seed = tf.log_prob_seed(|_| 1.0 / n);
        for r in 0..seed.rows() {
            let positions = f[tf.owner[r]].answer_tokens.len() as f64;
            let cur = tf.log_probs.row_slice(r);
            let prev = old.row_slice(r);
            for (c, o) in seed.row_slice_mut(r).iter_mut().enumerate() {
                *o += (cur[c].exp() - prev[c].exp()) / positions / n;
            }
        }
        Ok((-nll + kl, tf.backward(&seed)?))
    })
}

/// Negative preference optimization against a reference model.
pub fn npo(
    params: &ModelParams,
    reference: &ModelParams,
    d_f: &[Example],
    d_r: &[Example],
    cfg: &BaselineConfig,
) -> Result<(ModelParams, Vec<StepLoss>)> {
    cfg.validate()?;
    let beta = cfg.beta;
    let ref_lp = TeacherForced::run(reference, d_f)?.sequence_log_probs(d_f.len());
    finetune(params, None, d_f, d_r, cfg, "npo", |p, f, _| {
        let tf = TeacherForced::run(p, f)?;
        let lp = tf.sequence_log_probs(f.len());
        let n = f.len() as f64;
        let loss = lp
            .iter()
            .zip(&ref_lp)
            .map(|(c, r)| npo_term((c - r).exp(), beta))
            .sum::<f64>()
            / n;
        // d/d log pi of (2/beta) ln(1 + e^{beta t}) = 2 sigmoid(beta t)
        let coeff: Vec<f64> = lp
            .iter()
            .zip(&ref_lp)
            .map(|(c, r)| 2.0 / (1.0 + (-beta * (c - r)).exp()) / n)
            .collect();
        let seed = tf.log_prob_seed(|i| coeff[i]);
        Ok((loss, tf.backward(&seed)?))
    })
}

/// Per-neuron activation statistics over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronStats {
    pub abs_mean: f64,
    pub frequency: f64,
    pub variance: f64,
    pub rms: f64,
}

impl NeuronStats {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                abs_mean: 0.0,
                frequency: 0.0,
                variance: 0.0,
                rms: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        Self {
            abs_mean: values.iter().map(|v| v.abs()).sum::<f64>() / n,
            frequency: values.iter().filter(|v| **v > 0.0).count() as f64 / n,
            variance: values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n,
            rms: (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
        }
    }

    /// Summed importance `abs + freq + var + rms`.
    pub fn importance(&self) -> f64 {
        self.abs_mean + self.frequency + self.variance + self.rms
    }
}

/// Question-row activations of every neuron. Visual neurons only see
/// multimodal examples.
pub fn activation_samples(params: &ModelParams, examples: &[Example]) -> Result<Vec<(NeuronRef, Vec<f64>)>> {
    let rows: Vec<Row> = examples.iter().map(|e| Row::from_example(e, 0)).collect();
    let traces = if rows.is_empty() {
        Vec::new()
    } else {
        forward_rows(params, &rows, &[])?
    };
    Ok(params
        .config
        .all_neurons()
        .into_iter()
        .map(|n| {
            let vals = examples
                .iter()
                .zip(&traces)
                .filter(|(e, _)| n.branch == Branch::Textual || e.is_multimodal())
                .map(|(_, t)| t.activation(&n))
                .collect();
            (n, vals)
        })
        .collect())
}

pub fn neuron_stats(params: &ModelParams, examples: &[Example]) -> Result<Vec<(NeuronRef, NeuronStats)>> {
    Ok(activation_samples(params, examples)?
        .into_iter()
        .map(|(n, v)| (n, NeuronStats::from_values(&v)))
        .collect())
}

/// MANU selection: the `alpha_pct` percent of all neurons with the largest
/// `I(D^f) / (I(D^r) + eps)`, ties to the earlier neuron.
pub fn manu_select(params: &ModelParams, d_f: &[Example], d_r: &[Example], alpha_pct: f64) -> Result<Vec<NeuronRef>> {
    let sf = neuron_stats(params, d_f)?;
    let sr = neuron_stats(params, d_r)?;
    let mut scored: Vec<(NeuronRef, f64)> = sf
        .iter()
        .zip(&sr)
        .map(|((n, f), (_, r))| (*n, f.importance() / (r.importance() + MANU_EPSILON)))
        .collect();
    let count = (alpha_pct / 100.0 * scored.len() as f64).floor() as usize;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(count).map(|(n, _)| n).collect())
}

pub fn manu_prune(
    params: &ModelParams,
    d_f: &[Example],
    d_r: &[Example],
    cfg: &BaselineConfig,
) -> Result<(ModelParams, PruneMask)> {
    cfg.validate()?;
    let chosen = manu_select(params, d_f, d_r, cfg.alpha_pct)?;
    prune(params, &PruneSet::from_neurons(&chosen, params))
}

/// `|mean act on D^f - mean act on D^r|` per neuron; the `top_k` largest per
/// (branch, layer), ties to the lowest index.
pub fn residual_select(params: &ModelParams, d_f: &[Example], d_r: &[Example], top_k: usize) -> Result<PruneSet> {
    let af = activation_samples(params, d_f)?;
    let ar = activation_samples(params, d_r)?;
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let mut chosen = Vec::new();
    let h = params.config.hidden_dim;
    for branch in [Branch::Visual, Branch::Textual] {
        for layer in 1..=params.config.depth(branch) {
            let mut scored: Vec<(usize, f64)> = (0..h)
                .map(|index| {
                    let pos = af
                        .iter()
                        .position(|(n, _)| n.branch == branch && n.layer == layer && n.index == index)
                        .expect("neuron enumerated");
                    (index, (mean(&af[pos].1) - mean(&ar[pos].1)).abs())
                })
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            chosen.extend(scored.iter().take(top_k).map(|&(index, _)| NeuronRef {
                branch,
                layer,
                index,
            }));
        }
    }
    Ok(PruneSet::from_neurons(&chosen, params))
}

/// Everything a method may need, with shared splits and seeds.
pub struct UnlearnContext<'a> {
    pub frozen: &'a ModelParams,
    pub forget: &'a [Example],
    pub retain: &'a [Example],
    /// Paths located on the forget set (needed by path-based methods).
    pub paths: &'a [ExamplePaths],
    pub unlearn: &'a UnlearnConfig,
    pub baseline: &'a BaselineConfig,
    /// Schedule for NPO's retain-only reference model.
    pub reference_train: &'a TrainConfig,
}

#[derive(Clone, Debug)]
pub struct MethodOutcome {
    pub method: Method,
    pub params: ModelParams,
    /// Pruned neurons, if the method prunes.
    pub mask: Option<PruneMask>,
    pub curve: Vec<StepLoss>,
}

fn branch_only(ps: &PruneSet, keep: Branch) -> PruneSet {
    let mut out = ps.clone();
    out.entries.retain(|b, _| *b == keep);
    out
}

/// Run one method (the path editor itself, a baseline, or an ablation).
pub fn run_method(method: Method, ctx: &UnlearnContext<'_>) -> Result<MethodOutcome> {
    ctx.baseline.validate()?;
    let frozen = ctx.frozen;
    let ucfg = ctx.unlearn;
    let path_set = || -> Result<PruneSet> {
        if ctx.paths.is_empty() {
            return Err(Error::EmptyInput(format!("method {method} needs located paths")));
        }
        aggregate(ctx.paths, ucfg.top_k)
    };
    let edit_curve = |log: &crate::editor::EditLog| -> Vec<StepLoss> {
        log.steps
            .iter()
            .enumerate()
            .map(|(step, s)| StepLoss {
                step,
                epoch: s.epoch,
                loss: s.total,
            })
            .collect()
    };
    let prune_and_edit = |ps: PruneSet| -> Result<MethodOutcome> {
        let (pruned, mask) = prune(frozen, &ps)?;
        if mask.is_empty() {
            return Ok(MethodOutcome {
                method,
                params: pruned,
                mask: Some(mask),
                curve: Vec::new(),
            });
        }
        let (params, log) = rmisu_edit(&pruned, frozen, &mask, ctx.forget, ctx.retain, ucfg)?;
        Ok(MethodOutcome {
            method,
            params,
            mask: Some(mask),
            curve: edit_curve(&log),
        })
    };

    match method {
        Method::MipEditor => prune_and_edit(path_set()?),
        Method::OursIgiOnly => prune_and_edit(branch_only(&path_set()?, Branch::Textual)),
        Method::OursIfiOnly => prune_and_edit(branch_only(&path_set()?, Branch::Visual)),
        Method::OursPathResidual => {
            prune_and_edit(residual_select(frozen, ctx.forget, ctx.retain, ucfg.top_k)?)
        }
        Method::OursNoEdit => {
            let (params, mask) = prune(frozen, &path_set()?)?;
            Ok(MethodOutcome {
                method,
                params,
                mask: Some(mask),
                curve: Vec::new(),
            })
        }
        Method::OursFtInsteadOfRmisu => {
            let (mut pruned, mask) = prune(frozen, &path_set()?)?;
            if ucfg.reinit_pruned {
                reinit_incoming(&mut pruned, &mask.neurons, ucfg.rng_seed);
            }
            let pm = mask.param_mask(&pruned);
            let sched = BaselineConfig {
                epochs: ucfg.epochs,
                lr: ucfg.lr,
                momentum: ucfg.momentum,
                clip_norm: ucfg.clip_norm,
                seed: ucfg.rng_seed,
                ..ctx.baseline.clone()
            };
            let (params, curve) = finetune(&pruned, Some(&pm), ctx.forget, ctx.retain, &sched, "finetune", |p, _, r| {
                nll_and_grads(p, r)
            })?;
            Ok(MethodOutcome {
                method,
                params,
                mask: Some(mask),
                curve,
            })
        }
        Method::RmisuFullModel => {
            let (params, log) = rmisu_train(frozen, frozen, None, ctx.forget, ctx.retain, ucfg)?;
            Ok(MethodOutcome {
                method,
                params,
                mask: None,
                curve: edit_curve(&log),
            })
        }
        Method::GaDiff => {
            let (params, curve) = ga_diff(frozen, ctx.forget, ctx.retain, ctx.baseline)?;
            Ok(MethodOutcome {
                method,
                params,
                mask: None,
                curve,
            })
        }
        Method::KlMin => {
            let (params, curve) = kl_min(frozen, frozen, ctx.forget, ctx.retain, ctx.baseline)?;
            Ok(MethodOutcome {
                method,
                params,
                mask: None,
                curve,
            })
        }
        Method::Npo => {
            let init = ModelParams::init(&frozen.config)?;
            let reference = train(&init, ctx.retain, ctx.reference_train)?.params;
            let (params, curve) = npo(frozen, &reference, ctx.forget, ctx.retain, ctx.baseline)?;
            Ok(MethodOutcome {
                method,
                params,
                mask: None,
                curve,
            })
        }
        Method::Manu => {
            let (params, mask) = manu_prune(frozen, ctx.forget, ctx.retain, ctx.baseline)?;
            Ok(MethodOutcome {
                method,
                params,
                mask: Some(mask),
                curve: Vec::new(),
            })
        }
    }
}

/// Neurons in a prune mask, as a set.
pub fn masked_neurons(outcome: &MethodOutcome) -> BTreeSet<NeuronRef> {
    outcome
        .mask
        .as_ref()
        .map(|m| m.neurons.clone())
        .unwrap_or_default()
}
