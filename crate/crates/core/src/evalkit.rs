//! Measurements: accuracy and token-F1 per split and modality, forgetting and
//! retention ratios, activation-residual heatmaps, ground-truth probability
//! deviation, top-k neuron sweeps and the forget/retain separability probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::neuron_stats;
use crate::datagen::{Example, Split};
use crate::diffcore::{Bindings, Graph, Tensor};
use crate::editor::zero_neurons;
use crate::error::{Error, Result};
use crate::model::{forward_rows, predict, Branch, ModelParams, NeuronRef, Row};
use crate::optim::Sgd;
use crate::pathfinder::{rank_layers, ExamplePaths};

/// `2PR / (P + R)` over the token multisets; 0 when nothing overlaps.
pub fn token_f1(pred: &[usize], gold: &[usize]) -> f64 {
    let mut remaining: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in gold {
        *remaining.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = remaining.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    /// First answer token predicted correctly.
    pub accuracy: f64,
    /// Mean token-F1 of the greedy decode against the gold answer.
    pub token_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityMetrics {
    pub multimodal: Metrics,
    pub text_only: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub forget: ModalityMetrics,
    pub retain: ModalityMetrics,
}

/// A per-modality pair of ratios.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ByModality {
    pub multimodal: f64,
    pub text_only: f64,
}

impl ByModality {
    pub fn min(&self) -> f64 {
        self.multimodal.min(self.text_only)
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.multimodal + self.text_only)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub before: SplitMetrics,
    pub after: SplitMetrics,
    /// `1 - acc_forget_after / acc_forget_before`.
    pub forgetting_rate: ByModality,
    /// `acc_retain_after / acc_retain_before`.
    pub retention_ratio: ByModality,
    /// Wall-clock seconds; kept out of the serialized report so reports stay
    /// byte-identical across runs.
    #[serde(skip)]
    pub runtime_seconds: f64,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, before: SplitMetrics, after: SplitMetrics, runtime_seconds: f64) -> Self {
        let rate = |b: &Metrics, a: &Metrics| forgetting_rate(b.accuracy, a.accuracy);
        let ratio = |b: &Metrics, a: &Metrics| retention_ratio(b.accuracy, a.accuracy);
        Self {
            method: method.into(),
            forgetting_rate: ByModality {
                multimodal: rate(&before.forget.multimodal, &after.forget.multimodal),
                text_only: rate(&before.forget.text_only, &after.forget.text_only),
            },
            retention_ratio: ByModality {
                multimodal: ratio(&before.retain.multimodal, &after.retain.multimodal),
                text_only: ratio(&before.retain.text_only, &after.retain.text_only),
            },
            before,
            after,
            runtime_seconds,
        }
    }

    /// Forgetting minus retention loss, averaged over modalities.
    pub fn tradeoff(&self) -> f64 {
        self.forgetting_rate.mean() - (1.0 - self.retention_ratio.mean())
    }
}

/// `1 - after/before`; 0 when there was nothing to forget.
pub fn forgetting_rate(before: f64, after: f64) -> f64 {
    if before > 0.0 {
        1.0 - after / before
    } else {
        0.0
    }
}

/// `after/before`; 1 when there was nothing to retain.
pub fn retention_ratio(before: f64, after: f64) -> f64 {
    if before > 0.0 {
        after / before
    } else {
        1.0
    }
}

pub fn metrics(params: &ModelParams, examples: &[Example]) -> Result<Metrics> {
    if examples.is_empty() {
        return Ok(Metrics::default());
    }
    let preds = predict(params, examples)?;
    let n = examples.len() as f64;
    let correct = examples
        .iter()
        .zip(&preds)
        .filter(|(e, p)| p.first() == e.answer_tokens.first())
        .count();
    let f1: f64 = examples
        .iter()
        .zip(&preds)
        .map(|(e, p)| token_f1(p, &e.answer_tokens))
        .sum();
    Ok(Metrics {
        count: examples.len(),
        accuracy: correct as f64 / n,
        token_f1: f1 / n,
    })
}

pub fn modality_metrics(params: &ModelParams, examples: &[Example]) -> Result<ModalityMetrics> {
    let (mm, text): (Vec<Example>, Vec<Example>) =
        examples.iter().cloned().partition(Example::is_multimodal);
    Ok(ModalityMetrics {
        multimodal: metrics(params, &mm)?,
        text_only: metrics(params, &text)?,
    })
}

pub fn evaluate(params: &ModelParams, split: &Split) -> Result<SplitMetrics> {
    Ok(SplitMetrics {
        forget: modality_metrics(params, &split.forget)?,
        retain: modality_metrics(params, &split.retain)?,
    })
}

/// Mean `|act_after - act_before|` per neuron, `[layer][index]` per branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualMatrix {
    pub visual: Vec<Vec<f64>>,
    pub textual: Vec<Vec<f64>>,
}

impl ResidualMatrix {
    pub fn branch(&self, branch: Branch) -> &[Vec<f64>] {
        match branch {
            Branch::Visual => &self.visual,
            Branch::Textual => &self.textual,
        }
    }

    pub fn get(&self, n: &NeuronRef) -> f64 {
        self.branch(n.branch)[n.layer - 1][n.index]
    }

    /// Layer rows, neuron columns.
    pub fn to_csv(&self, branch: Branch) -> String {
        let rows = self.branch(branch);
        let width = rows.first().map_or(0, Vec::len);
        let mut out = String::from("layer");
        for i in 0..width {
            let _ = write!(out, ",n{i}");
        }
        out.push('\n');
        for (l, row) in rows.iter().enumerate() {
            let _ = write!(out, "{}", l + 1);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn question_rows(examples: &[Example]) -> Vec<Row> {
    examples.iter().map(|e| Row::from_example(e, 0)).collect()
}

/// Activation residuals on the question rows of `examples`.
pub fn residual_heatmap(before: &ModelParams, after: &ModelParams, examples: &[Example]) -> Result<ResidualMatrix> {
    if before.config != after.config {
        return Err(Error::InvalidConfig("models have different layouts".into()));
    }
    let cfg = &before.config;
    let zeros = |b| vec![vec![0.0; cfg.hidden_dim]; cfg.depth(b)];
    let mut m = ResidualMatrix {
        visual: zeros(Branch::Visual),
        textual: zeros(Branch::Textual),
    };
    if examples.is_empty() {
        return Ok(m);
    }
    let rows = question_rows(examples);
    let tb = forward_rows(before, &rows, &[])?;
    let ta = forward_rows(after, &rows, &[])?;
    let n = examples.len() as f64;
    for (b, a) in tb.iter().zip(&ta) {
        for (dst, xb, xa) in [
            (&mut m.visual, &b.visual, &a.visual),
            (&mut m.textual, &b.textual, &a.textual),
        ] {
            for (row, (lb, la)) in dst.iter_mut().zip(xb.iter().zip(xa)) {
                for (o, (vb, va)) in row.iter_mut().zip(lb.iter().zip(la)) {
                    *o += (va - vb).abs() / n;
                }
            }
        }
    }
    Ok(m)
}

/// `|p_before(y) - p_after(y)| / p_before(y)` per example, `y` the first gold
/// answer token, read on the question row.
pub fn logit_mae(before: &ModelParams, after: &ModelParams, examples: &[Example]) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let rows = question_rows(examples);
    let tb = forward_rows(before, &rows, &[])?;
    let ta = forward_rows(after, &rows, &[])?;
    Ok(examples
        .iter()
        .zip(tb.iter().zip(&ta))
        .map(|(e, (b, a))| {
            let y = e.answer_tokens[0];
            relative_deviation(b.log_probs[y].exp(), a.log_probs[y].exp())
        })
        .collect())
}

pub fn relative_deviation(p_before: f64, p_after: f64) -> f64 {
    if p_before > 0.0 {
        (p_before - p_after).abs() / p_before
    } else {
        0.0
    }
}

/// `count` distinct neurons drawn uniformly from the whole model.
pub fn random_neurons<R: Rng + ?Sized>(params: &ModelParams, count: usize, rng: &mut R) -> Vec<NeuronRef> {
    let all = params.config.all_neurons();
    all.choose_multiple(rng, count.min(all.len())).copied().collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// One-sided exact sign test for `P(X > Y) > 1/2`. Ties are dropped.
/// Returns `(wins, non-tied pairs, p-value)`.
pub fn sign_test(pairs: &[(f64, f64)]) -> (usize, usize, f64) {
    let wins = pairs.iter().filter(|(x, y)| x > y).count();
    let n = pairs.iter().filter(|(x, y)| x != y).count();
    let mut p = 0.0;
    for k in wins..=n {
        p += binomial(n, k) * 0.5f64.powi(n as i32);
    }
    (wins, n, p.min(1.0))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Aggregated influential paths.
    Path,
    /// Per-neuron activation importance, independent of other layers.
    Pointwise,
}

/// Per (branch, layer) neuron order, most important first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRanking {
    pub selector: Selector,
    pub order: BTreeMap<Branch, Vec<Vec<usize>>>,
}

impl LayerRanking {
    pub fn from_paths(paths: &[ExamplePaths]) -> Result<Self> {
        let order = rank_layers(paths)?
            .into_iter()
            .map(|(b, layers)| {
                (b, layers.into_iter().map(|l| l.into_iter().map(|r| r.index).collect()).collect())
            })
            .collect();
        Ok(Self {
            selector: Selector::Path,
            order,
        })
    }

    /// Order by summed activation statistics on `examples`, ties to the
    /// lower index.
    pub fn pointwise(params: &ModelParams, examples: &[Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("pointwise ranking needs examples".into()));
        }
        let stats = neuron_stats(params, examples)?;
        let mut order: BTreeMap<Branch, Vec<Vec<usize>>> = BTreeMap::new();
        for branch in [Branch::Visual, Branch::Textual] {
            let layers = (1..=params.config.depth(branch))
                .map(|layer| {
                    let mut scored: Vec<(usize, f64)> = stats
                        .iter()
                        .filter(|(n, _)| n.branch == branch && n.layer == layer)
                        .map(|(n, s)| (n.index, s.importance()))
                        .collect();
                    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    scored.into_iter().map(|(i, _)| i).collect()
                })
                .collect();
            order.insert(branch, layers);
        }
        Ok(Self {
            selector: Selector::Pointwise,
            order,
        })
    }

    /// Copy of `params` keeping only the first `k` neurons of every layer.
    pub fn keep_top(&self, params: &ModelParams, k: usize) -> Result<ModelParams> {
        let h = params.config.hidden_dim;
        if k > h {
            return Err(Error::InvalidConfig(format!("k {k} exceeds hidden width {h}")));
        }
        let mut out = params.clone();
        let mut drop = Vec::new();
        for branch in [Branch::Visual, Branch::Textual] {
            let layers = self.order.get(&branch).ok_or_else(|| {
                Error::InvalidConfig(format!("ranking has no {branch} layers"))
            })?;
            if layers.len() != params.config.depth(branch) {
                return Err(Error::InvalidConfig(format!("ranking depth mismatch on {branch} branch")));
            }
            for (l, order) in layers.iter().enumerate() {
                drop.extend(order.iter().skip(k).map(|&index| NeuronRef {
                    branch,
                    layer: l + 1,
                    index,
                }));
            }
        }
        zero_neurons(&mut out, &drop);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub forget_accuracy: f64,
    pub retain_accuracy: f64,
}

fn pooled_accuracy(params: &ModelParams, examples: &[Example]) -> Result<f64> {
    Ok(metrics(params, examples)?.accuracy)
}

pub fn topk_sweep(
    params: &ModelParams,
    ranking: &LayerRanking,
    k_values: &[usize],
    split: &Split,
) -> Result<Vec<SweepPoint>> {
    k_values
        .iter()
        .map(|&k| {
            let kept = ranking.keep_top(params, k)?;
            Ok(SweepPoint {
                k,
                forget_accuracy: pooled_accuracy(&kept, &split.forget)?,
                retain_accuracy: pooled_accuracy(&kept, &split.retain)?,
            })
        })
        .collect()
}

/// Smallest swept `k` whose retain accuracy reaches `fraction * full`.
pub fn smallest_k_reaching(curve: &[SweepPoint], full: f64, fraction: f64) -> Option<usize> {
    curve
        .iter()
        .filter(|p| p.retain_accuracy >= fraction * full)
        .map(|p| p.k)
        .min()
}

pub fn sweep_csv(path_curve: &[SweepPoint], pointwise_curve: &[SweepPoint]) -> String {
    let mut out = String::from("selector,k,forget_accuracy,retain_accuracy\n");
    for (name, curve) in [("path", path_curve), ("pointwise", pointwise_curve)] {
        for p in curve {
            let _ = writeln!(out, "{name},{},{},{}", p.k, p.forget_accuracy, p.retain_accuracy);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 300,
            lr: 0.1,
            momentum: 0.9,
            train_fraction: 0.7,
            seed: 1234,
        }
    }
}

/// Question-row log-probabilities, one feature vector per example.
pub fn output_features(params: &ModelParams, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    Ok(forward_rows(params, &question_rows(examples), &[])?
        .into_iter()
        .map(|t| t.log_probs)
        .collect())
}

/// Held-out accuracy of a one-hidden-layer classifier separating forget from
/// retain outputs. Classes are balanced by subsampling the larger one.
pub fn separability_probe(params: &ModelParams, d_f: &[Example], d_r: &[Example], cfg: &ProbeConfig) -> Result<f64> {
    probe_accuracy(&output_features(params, d_f)?, &output_features(params, d_r)?, cfg)
}

pub fn probe_accuracy(positive: &[Vec<f64>], negative: &[Vec<f64>], cfg: &ProbeConfig) -> Result<f64> {
    if positive.len() < 2 || negative.len() < 2 {
        return Err(Error::EmptyInput("the probe needs at least two examples per class".into()));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) || cfg.hidden == 0 {
        return Err(Error::InvalidConfig("probe needs hidden > 0 and train_fraction in (0, 1)".into()));
    }
    let dim = positive[0].len();
    if positive.iter().chain(negative).any(|f| f.len() != dim) {
        return Err(Error::InvalidConfig("probe features of unequal length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_class = positive.len().min(negative.len());
    let n_train = ((per_class as f64 * cfg.train_fraction).round() as usize).clamp(1, per_class - 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, feats) in [(1usize, positive), (0, negative)] {
        let mut idx: Vec<usize> = (0..feats.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_class);
        for (j, &i) in idx.iter().enumerate() {
            let dst = if j < n_train { &mut train } else { &mut test };
            dst.push((feats[i].clone(), label));
        }
    }

    // standardize with training statistics
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for (f, _) in &train {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / train.len() as f64);
    }
    for (f, _) in &train {
        for (s, (v, m)) in sd.iter_mut().zip(f.iter().zip(&mean)) {
            *s += (v - m) * (v - m) / train.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let scale = |f: &[f64]| -> Vec<f64> { f.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect() };

    let bound1 = 1.0 / (dim as f64).sqrt();
    let bound2 = 1.0 / (cfg.hidden as f64).sqrt();
    let mut init = |r, c, b: f64| {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-b..b)).collect()).expect("shape")
    };
    let mut weights = vec![
        init(dim, cfg.hidden, bound1),
        Tensor::zeros(1, cfg.hidden),
        init(cfg.hidden, 2, bound2),
        Tensor::zeros(1, 2),
    ];

    let build = |targets: Option<Vec<usize>>| {
        let mut g = Graph::new();
        let x = g.input("x");
        let nodes: Vec<_> = ["w1", "b1", "w2", "b2"].iter().map(|n| g.input(*n)).collect();
        let h1 = g.matmul(x, nodes[0]);
        let h1 = g.add(h1, nodes[1]);
        let h1 = g.relu(h1);
        let o = g.matmul(h1, nodes[2]);
        let logits = g.add(o, nodes[3]);
        let loss = targets.map(|t| {
            let w = vec![1.0 / t.len() as f64; t.len()];
            g.softmax_cross_entropy(logits, t, w)
        });
        (g, nodes, logits, loss)
    };
    let (g, nodes, _, loss) = build(Some(train.iter().map(|(_, y)| *y).collect()));
    let loss = loss.expect("training graph has a loss");

    let matrix = |rows: &[(Vec<f64>, usize)]| -> Tensor {
        let data = rows.iter().flat_map(|(f, _)| scale(f)).collect();
        Tensor::new(rows.len(), dim, data).expect("shape")
    };
    let bind = |w: &[Tensor], xs: Tensor| -> Bindings {
        let mut b = Bindings::new();
        b.insert("x".into(), xs);
        for (name, t) in ["w1", "b1", "w2", "b2"].iter().zip(w) {
            b.insert((*name).into(), t.clone());
        }
        b
    };
    let x_train = matrix(&train);
    let refs: Vec<&Tensor> = weights.iter().collect();
    let mut opt = Sgd::for_tensors(&refs, cfg.lr, cfg.momentum);
    for step in 0..cfg.epochs {
        let ev = g.forward(&bind(&weights, x_train.clone()))?;
        let l = ev.value(loss).item();
        if !l.is_finite() {
            return Err(Error::Divergence {
                stage: "probe",
                step,
                loss: l,
            });
        }
        let grads = g.grad(&ev, loss, &nodes)?;
        opt.step_tensors(weights.iter_mut().collect(), &grads, None);
    }

    let (g, _, logits, _) = build(None);
    let ev = g.forward(&bind(&weights, matrix(&test)))?;
    let out = ev.value(logits);
    let correct = test
        .iter()
        .enumerate()
        .filter(|(r, (_, y))| usize::from(out.get(*r, 1) > out.get(*r, 0)) == *y)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, split, CorpusConfig, SplitSpec};
    use crate::model::ModelConfig;

    fn small() -> (ModelParams, Split) {
        let cfg = ModelConfig {
            vocab_size: 48,
            embed_dim: 8,
            visual_input_dim: 6,
            hidden_dim: 6,
            num_text_layers: 2,
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
        (ModelParams::init(&cfg).unwrap(), s)
    }

    #[test]
    fn token_f1_cases() {
        assert_eq!(token_f1(&[1, 2], &[2, 3]), 0.5);
        assert_eq!(token_f1(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(token_f1(&[4], &[1, 2]), 0.0);
        assert_eq!(token_f1(&[2, 2], &[2, 3]), 0.5);
    }

    #[test]
    fn rates_and_deviation() {
        assert_eq!(forgetting_rate(0.8, 0.2), 1.0 - 0.25);
        assert_eq!(retention_ratio(0.5, 0.5), 1.0);
        assert_eq!(forgetting_rate(0.0, 0.3), 0.0);
        assert!((relative_deviation(0.8, 0.6) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn no_op_report_and_heatmap() {
        let (p, s) = small();
        let m = evaluate(&p, &s).unwrap();
        let r = EvalReport::new("noop", m.clone(), m, 0.0);
        for v in [r.forgetting_rate, r.retention_ratio] {
            assert!(v.multimodal == 0.0 || v.multimodal == 1.0);
        }
        if r.before.forget.multimodal.accuracy > 0.0 {
            assert_eq!(r.forgetting_rate.multimodal, 0.0);
        }
        let h = residual_heatmap(&p, &p, &s.retain).unwrap();
        assert_eq!(h.textual.len(), 2);
        assert_eq!(h.visual[0].len(), 6);
        assert!(h.textual.iter().chain(&h.visual).flatten().all(|v| *v == 0.0));
        assert!(logit_mae(&p, &p, &s.forget).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sign_test_values() {
        let pairs: Vec<(f64, f64)> = (0..20).map(|i| (if i < 15 { 1.0 } else { 0.0 }, 0.5)).collect();
        let (w, n, p) = sign_test(&pairs);
        assert_eq!((w, n), (15, 20));
        // P(X >= 15), X ~ Bin(20, 1/2) = 21700 / 2^20
        assert!((p - 21700.0 / 1048576.0).abs() < 1e-12);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn keep_all_is_identity() {
        let (p, s) = small();
        let r = LayerRanking::pointwise(&p, &s.retain).unwrap();
        assert_eq!(r.keep_top(&p, 6).unwrap(), p);
        let curve = topk_sweep(&p, &r, &[6], &s).unwrap();
        assert_eq!(curve[0].retain_accuracy, metrics(&p, &s.retain).unwrap().accuracy);
    }

    #[test]
    fn probe_separated_and_chance() {
        let pos: Vec<Vec<f64>> = (0..40).map(|i| vec![1.0 + i as f64 * 0.01, 0.0]).collect();
        let neg: Vec<Vec<f64>> = (0..40).map(|i| vec![-1.0 - i as f64 * 0.01, 0.0]).collect();
        assert_eq!(probe_accuracy(&pos, &neg, &ProbeConfig::default()).unwrap(), 1.0);
    }
}
