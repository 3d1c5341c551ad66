//! Dual-branch toy multimodal model.
//!
//! ```text
//! tokens --embed--> mean-pool ------------------+--> textual FFN blocks --> head --> logits
//! image  --> visual FFN blocks --> projection --^ (added before `fusion_layer`)
//! ```
//!
//! Every FFN block is residual: `x + relu(x W_up + b_up) W_down + b_down`.
//! A neuron is one column of `W_up` (with its `b_up` entry) feeding one row of
//! `W_down`; its activation is the post-ReLU scalar. Text-only rows skip the
//! visual branch: their visual activations are recorded as zero and the
//! projected visual features are masked out.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::datagen::Example;
use crate::diffcore::{log_softmax_rows, Bindings, Evaluation, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Sgd};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Textual,
    Visual,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Branch::Textual => write!(f, "textual"),
            Branch::Visual => write!(f, "visual"),
        }
    }
}

/// One hidden FFN unit. `layer` is 1-based, `index` 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronRef {
    pub branch: Branch,
    pub layer: usize,
    pub index: usize,
}

impl NeuronRef {
    pub fn textual(layer: usize, index: usize) -> Self {
        Self {
            branch: Branch::Textual,
            layer,
            index,
        }
    }

    pub fn visual(layer: usize, index: usize) -> Self {
        Self {
            branch: Branch::Visual,
            layer,
            index,
        }
    }
}

impl fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}].{}", self.branch, self.layer, self.index)
    }
}

/// What happens to one activation before it feeds the next layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intervention {
    /// Multiply the computed activation by a factor in `[0, 1]`.
    Scale(f64),
    ForceZero,
    /// Replace the activation with a fixed value (an interpolation frame).
    Pin(f64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationOverride {
    entries: BTreeMap<NeuronRef, Intervention>,
}

impl ActivationOverride {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn scale(&mut self, neuron: NeuronRef, factor: f64) -> Result<&mut Self> {
        if !(0.0..=1.0).contains(&factor) {
            return Err(Error::InvalidConfig(format!(
                "override scale must lie in [0, 1], got {factor}"
            )));
        }
        self.entries.insert(neuron, Intervention::Scale(factor));
        Ok(self)
    }

    pub fn zero(&mut self, neuron: NeuronRef) -> &mut Self {
        self.entries.insert(neuron, Intervention::ForceZero);
        self
    }

    pub fn pin(&mut self, neuron: NeuronRef, value: f64) -> &mut Self {
        self.entries.insert(neuron, Intervention::Pin(value));
        self
    }

    pub fn get(&self, neuron: &NeuronRef) -> Option<Intervention> {
        self.entries.get(neuron).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NeuronRef, &Intervention)> {
        self.entries.iter()
    }

    fn touches(&self, branch: Branch, layer: usize) -> bool {
        self.entries
            .keys()
            .any(|n| n.branch == branch && n.layer == layer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub visual_input_dim: usize,
    pub hidden_dim: usize,
    pub num_text_layers: usize,
    pub num_visual_layers: usize,
    pub answer_classes: usize,
    /// Textual layer (1-based) before which the visual features are added.
    #[serde(default = "default_fusion_layer")]
    pub fusion_layer: usize,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn default_fusion_layer() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 32,
            visual_input_dim: 16,
            hidden_dim: 32,
            num_text_layers: 4,
            num_visual_layers: 4,
            answer_classes: 32,
            fusion_layer: 1,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_text_layers < 1 || self.num_visual_layers < 1 {
            return bad("both branches need at least one layer".into());
        }
        if self.hidden_dim < 1 {
            return bad("hidden_dim must be positive".into());
        }
        if self.vocab_size == 0 || self.embed_dim == 0 || self.visual_input_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.answer_classes < 2 || self.answer_classes > self.vocab_size {
            return bad(format!(
                "answer_classes must lie in 2..={}, got {}",
                self.vocab_size, self.answer_classes
            ));
        }
        if !(1..=self.num_text_layers).contains(&self.fusion_layer) {
            return bad(format!(
                "fusion_layer must lie in 1..={}",
                self.num_text_layers
            ));
        }
        Ok(())
    }

    pub fn depth(&self, branch: Branch) -> usize {
        match branch {
            Branch::Textual => self.num_text_layers,
            Branch::Visual => self.num_visual_layers,
        }
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (v, d, dv, h, c) = (
            self.vocab_size,
            self.embed_dim,
            self.visual_input_dim,
            self.hidden_dim,
            self.answer_classes,
        );
        v * d
            + self.num_visual_layers * (2 * dv * h + h + dv)
            + dv * d
            + d
            + self.num_text_layers * (2 * d * h + h + d)
            + d * c
            + c
    }

    pub fn check_neuron(&self, n: &NeuronRef) -> Result<()> {
        let depth = self.depth(n.branch);
        if n.layer < 1 || n.layer > depth {
            return Err(Error::InvalidNeuron(format!(
                "{n}: layer outside 1..={depth}"
            )));
        }
        if n.index >= self.hidden_dim {
            return Err(Error::InvalidNeuron(format!(
                "{n}: index >= hidden_dim {}",
                self.hidden_dim
            )));
        }
        Ok(())
    }

    /// Every neuron of the model, visual branch first.
    pub fn all_neurons(&self) -> Vec<NeuronRef> {
        let mut out = Vec::new();
        for branch in [Branch::Visual, Branch::Textual] {
            for layer in 1..=self.depth(branch) {
                for index in 0..self.hidden_dim {
                    out.push(NeuronRef {
                        branch,
                        layer,
                        index,
                    });
                }
            }
        }
        out
    }
}

/// Residual FFN block. `w_up` is `[in, hidden]`, `w_down` is `[hidden, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnBlock {
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

impl FfnBlock {
    fn init(rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Self {
        Self {
            w_up: uniform(rng, dim, hidden, dim),
            b_up: uniform(rng, 1, hidden, dim),
            w_down: uniform(rng, hidden, dim, hidden),
            b_down: uniform(rng, 1, dim, hidden),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(rows, cols, data).expect("init shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub visual: Vec<FfnBlock>,
    pub visual_proj: Tensor,
    pub visual_proj_b: Tensor,
    pub textual: Vec<FfnBlock>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Elementwise trainability mask in [`ModelParams::tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMask {
    pub masks: Vec<Vec<bool>>,
}

impl ParamMask {
    pub fn count(&self) -> usize {
        self.masks.iter().map(|m| m.iter().filter(|b| **b).count()).sum()
    }
}

impl ModelParams {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, dv, h, c) = (
            config.embed_dim,
            config.visual_input_dim,
            config.hidden_dim,
            config.answer_classes,
        );
        // a lookup row has a single active input
        let embed = uniform(&mut rng, config.vocab_size, d, 1);
        let visual = (0..config.num_visual_layers)
            .map(|_| FfnBlock::init(&mut rng, dv, h))
            .collect();
        let visual_proj = uniform(&mut rng, dv, d, dv);
        let visual_proj_b = uniform(&mut rng, 1, d, dv);
        let textual = (0..config.num_text_layers)
            .map(|_| FfnBlock::init(&mut rng, d, h))
            .collect();
        let head_w = uniform(&mut rng, d, c, d);
        let head_b = uniform(&mut rng, 1, c, d);
        Ok(Self {
            config: config.clone(),
            embed,
            visual,
            visual_proj,
            visual_proj_b,
            textual,
            head_w,
            head_b,
        })
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (prefix, blocks) in [("visual", &self.visual)] {
            push_blocks(&mut out, prefix, blocks);
        }
        out.push(("visual_proj.w".into(), &self.visual_proj));
        out.push(("visual_proj.b".into(), &self.visual_proj_b));
        push_blocks(&mut out, "textual", &self.textual);
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embed];
        for b in &mut self.visual {
            out.extend([&mut b.w_up, &mut b.b_up, &mut b.w_down, &mut b.b_down]);
        }
        out.push(&mut self.visual_proj);
        out.push(&mut self.visual_proj_b);
        for b in &mut self.textual {
            out.extend([&mut b.w_up, &mut b.b_up, &mut b.w_down, &mut b.b_down]);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn block(&self, branch: Branch, layer: usize) -> &FfnBlock {
        match branch {
            Branch::Textual => &self.textual[layer - 1],
            Branch::Visual => &self.visual[layer - 1],
        }
    }

    pub fn block_mut(&mut self, branch: Branch, layer: usize) -> &mut FfnBlock {
        match branch {
            Branch::Textual => &mut self.textual[layer - 1],
            Branch::Visual => &mut self.visual[layer - 1],
        }
    }

    fn bindings(&self) -> Bindings {
        self.tensors()
            .into_iter()
            .map(|(name, t)| (name, t.clone()))
            .collect()
    }

    /// Index of the first tensor (`w_up`) of a block in [`Self::tensors`] order.
    fn block_tensor_offset(&self, branch: Branch, layer: usize) -> usize {
        match branch {
            Branch::Visual => 1 + 4 * (layer - 1),
            Branch::Textual => 1 + 4 * self.visual.len() + 2 + 4 * (layer - 1),
        }
    }

    /// Mask selecting the parameters attached to `neurons`: the `W_up` column,
    /// the `b_up` entry and the `W_down` row of each.
    pub fn neuron_mask<'a>(&self, neurons: impl IntoIterator<Item = &'a NeuronRef>) -> ParamMask {
        let mut masks: Vec<Vec<bool>> = self
            .tensors()
            .iter()
            .map(|(_, t)| vec![false; t.len()])
            .collect();
        let h = self.config.hidden_dim;
        for n in neurons {
            let off = self.block_tensor_offset(n.branch, n.layer);
            let block = self.block(n.branch, n.layer);
            let dim = block.w_up.rows();
            for r in 0..dim {
                masks[off][r * h + n.index] = true;
            }
            masks[off + 1][n.index] = true;
            for c in 0..dim {
                masks[off + 2][n.index * dim + c] = true;
            }
        }
        ParamMask { masks }
    }

    pub fn full_mask(&self) -> ParamMask {
        ParamMask {
            masks: self
                .tensors()
                .iter()
                .map(|(_, t)| vec![true; t.len()])
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn to_checkpoint_json(&self, config_hash: Option<&str>) -> Result<String> {
        let mut weights = BTreeMap::new();
        for (name, t) in self.tensors() {
            let body: Vec<String> = t.data().iter().map(|v| format!("{v:.16e}")).collect();
            let raw = RawValue::from_string(format!("[{}]", body.join(",")))?;
            weights.insert(name, raw);
        }
        let doc = CheckpointOut {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_hash: config_hash.map(str::to_string),
            config: &self.config,
            weights,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let doc: CheckpointIn = serde_json::from_str(text)?;
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::MalformedArtifact {
                path: "checkpoint".into(),
                detail: format!("unsupported format_version {}", doc.format_version),
            });
        }
        let mut params = ModelParams::init(&doc.config)?;
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, tensor) in names.iter().zip(params.tensors_mut()) {
            let values = doc.weights.get(name).ok_or_else(|| Error::MalformedArtifact {
                path: "checkpoint".into(),
                detail: format!("missing weight array `{name}`"),
            })?;
            if values.len() != tensor.len() {
                return Err(Error::MalformedArtifact {
                    path: "checkpoint".into(),
                    detail: format!(
                        "`{name}` has {} values, expected {}",
                        values.len(),
                        tensor.len()
                    ),
                });
            }
            tensor.data_mut().copy_from_slice(values);
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        fs::write(path, self.to_checkpoint_json(config_hash)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_checkpoint_json(&fs::read_to_string(path)?)
    }
}

fn push_blocks<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, blocks: &'a [FfnBlock]) {
    for (i, b) in blocks.iter().enumerate() {
        let l = i + 1;
        out.push((format!("{prefix}.{l}.w_up"), &b.w_up));
        out.push((format!("{prefix}.{l}.b_up"), &b.b_up));
        out.push((format!("{prefix}.{l}.w_down"), &b.w_down));
        out.push((format!("{prefix}.{l}.b_down"), &b.b_down));
    }
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    config: &'a ModelConfig,
    weights: BTreeMap<String, Box<RawValue>>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    format_version: u32,
    config: ModelConfig,
    weights: BTreeMap<String, Vec<f64>>,
}

/// One forward row: a token bag and an optional image.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub tokens: Vec<usize>,
    pub image: Option<Vec<f64>>,
}

impl Row {
    /// Row for predicting answer position `position` under teacher forcing.
    pub fn from_example(example: &Example, position: usize) -> Self {
        Self {
            tokens: example.prompt(position),
            image: example.is_multimodal().then(|| example.image_vec.clone()),
        }
    }
}

/// A built batch graph with handles to the interesting nodes.
pub(crate) struct ModelGraph {
    pub graph: Graph,
    pub bindings: Bindings,
    /// Parameter input nodes in [`ModelParams::tensors`] order.
    pub param_nodes: Vec<NodeId>,
    pub textual_acts: Vec<NodeId>,
    /// `None` when no row in the batch is multimodal.
    pub visual_acts: Vec<Option<NodeId>>,
    /// Residual stream after each textual layer.
    pub hidden: Vec<NodeId>,
    pub logits: NodeId,
}

impl ModelGraph {
    pub fn act_node(&self, branch: Branch, layer: usize) -> Option<NodeId> {
        match branch {
            Branch::Textual => Some(self.textual_acts[layer - 1]),
            Branch::Visual => self.visual_acts[layer - 1],
        }
    }

    pub fn forward(&self) -> Result<Evaluation> {
        self.graph.forward(&self.bindings)
    }
}

/// Build the batch graph. `overrides` is either empty or holds one override
/// per row.
pub(crate) fn build_graph(
    params: &ModelParams,
    rows: &[Row],
    overrides: &[ActivationOverride],
) -> Result<ModelGraph> {
    build_graph_with(params, rows, overrides, None)
}

/// [`build_graph`] with optional inverted dropout on every FFN activation.
fn build_graph_with(
    params: &ModelParams,
    rows: &[Row],
    overrides: &[ActivationOverride],
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<ModelGraph> {
    let cfg = &params.config;
    if rows.is_empty() {
        return Err(Error::EmptyInput("forward batch has no rows".into()));
    }
    if !overrides.is_empty() && overrides.len() != rows.len() {
        return Err(Error::InvalidConfig(format!(
            "{} overrides for {} rows",
            overrides.len(),
            rows.len()
        )));
    }
    for row in rows {
        if row.tokens.is_empty() {
            return Err(Error::EmptyInput("row has no tokens".into()));
        }
        if let Some(&t) = row.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::OutOfVocabulary {
                token: t,
                vocab_size: cfg.vocab_size,
            });
        }
        if let Some(img) = &row.image {
            if img.len() != cfg.visual_input_dim {
                return Err(Error::InvalidConfig(format!(
                    "image has {} values, expected {}",
                    img.len(),
                    cfg.visual_input_dim
                )));
            }
        }
    }
    for ov in overrides {
        for (n, _) in ov.iter() {
            cfg.check_neuron(n)?;
        }
    }

    let b = rows.len();
    let h = cfg.hidden_dim;
    let mut g = Graph::new();
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let param_nodes: Vec<NodeId> = names.iter().map(|n| g.input(n.clone())).collect();
    let node_of = |name: &str| param_nodes[names.iter().position(|n| n == name).unwrap()];

    // token bag
    let total_tokens: usize = rows.iter().map(|r| r.tokens.len()).sum();
    let mut onehot = vec![0.0; total_tokens * cfg.vocab_size];
    let mut r = 0;
    for row in rows {
        for &t in &row.tokens {
            onehot[r * cfg.vocab_size + t] = 1.0;
            r += 1;
        }
    }
    let onehot = g.constant(Tensor::new(total_tokens, cfg.vocab_size, onehot)?);
    let token_emb = g.matmul(onehot, node_of("embed"));
    let pooled = g.mean_pool(token_emb, rows.iter().map(|r| r.tokens.len()).collect());

    let any_image = rows.iter().any(|r| r.image.is_some());
    let all_image = rows.iter().all(|r| r.image.is_some());
    let row_has_image: Vec<bool> = rows.iter().map(|r| r.image.is_some()).collect();

    let mut visual_acts = vec![None; cfg.num_visual_layers];
    let mut visual_features = None;
    if any_image {
        let dv = cfg.visual_input_dim;
        let mut img = Vec::with_capacity(b * dv);
        for row in rows {
            match &row.image {
                Some(v) => img.extend_from_slice(v),
                None => img.extend(std::iter::repeat_n(0.0, dv)),
            }
        }
        let mut x = g.constant(Tensor::new(b, dv, img)?);
        for l in 1..=cfg.num_visual_layers {
            let act = ffn_activation(&mut g, x, &node_of, "visual", l);
            let act = apply_override(&mut g, act, Branch::Visual, l, h, overrides, (!all_image).then_some(&row_has_image[..]));
            let act = apply_dropout(&mut g, act, b, h, dropout.as_mut());
            visual_acts[l - 1] = Some(act);
            x = ffn_output(&mut g, x, act, &node_of, "visual", l);
        }
        let proj = g.matmul(x, node_of("visual_proj.w"));
        let mut feat = g.add(proj, node_of("visual_proj.b"));
        if !all_image {
            let d = cfg.embed_dim;
            let mut mask = vec![0.0; b * d];
            for (r, has) in row_has_image.iter().enumerate() {
                if *has {
                    mask[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 1.0);
                }
            }
            feat = g.scale(feat, Tensor::new(b, d, mask)?);
        }
        visual_features = Some(feat);
    }

    let mut x = pooled;
    let mut textual_acts = Vec::with_capacity(cfg.num_text_layers);
    let mut hidden = Vec::with_capacity(cfg.num_text_layers);
    for l in 1..=cfg.num_text_layers {
        if l == cfg.fusion_layer {
            if let Some(feat) = visual_features {
                x = g.add(x, feat);
            }
        }
        let act = ffn_activation(&mut g, x, &node_of, "textual", l);
        let act = apply_override(&mut g, act, Branch::Textual, l, h, overrides, None);
        let act = apply_dropout(&mut g, act, b, h, dropout.as_mut());
        textual_acts.push(act);
        x = ffn_output(&mut g, x, act, &node_of, "textual", l);
        hidden.push(x);
    }
    let head = g.matmul(x, node_of("head.w"));
    let logits = g.add(head, node_of("head.b"));

    Ok(ModelGraph {
        graph: g,
        bindings: params.bindings(),
        param_nodes,
        textual_acts,
        visual_acts,
        hidden,
        logits,
    })
}

fn ffn_activation(
    g: &mut Graph,
    x: NodeId,
    node_of: &impl Fn(&str) -> NodeId,
    prefix: &str,
    l: usize,
) -> NodeId {
    let pre = g.matmul(x, node_of(&format!("{prefix}.{l}.w_up")));
    let pre = g.add(pre, node_of(&format!("{prefix}.{l}.b_up")));
    g.relu(pre)
}

fn ffn_output(
    g: &mut Graph,
    x: NodeId,
    act: NodeId,
    node_of: &impl Fn(&str) -> NodeId,
    prefix: &str,
    l: usize,
) -> NodeId {
    let out = g.matmul(act, node_of(&format!("{prefix}.{l}.w_down")));
    let out = g.add(out, node_of(&format!("{prefix}.{l}.b_down")));
    g.add(x, out)
}

fn apply_dropout(
    g: &mut Graph,
    act: NodeId,
    rows: usize,
    hidden: usize,
    dropout: Option<&mut (f64, &mut ChaCha8Rng)>,
) -> NodeId {
    let Some((p, rng)) = dropout else { return act };
    if *p <= 0.0 {
        return act;
    }
    let keep = 1.0 / (1.0 - *p);
    let mask = (0..rows * hidden)
        .map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep })
        .collect();
    g.scale(act, Tensor::new(rows, hidden, mask).expect("dropout shape"))
}

fn apply_override(
    g: &mut Graph,
    act: NodeId,
    branch: Branch,
    layer: usize,
    hidden: usize,
    overrides: &[ActivationOverride],
    row_enabled: Option<&[bool]>,
) -> NodeId {
    let touched = overrides.iter().any(|o| o.touches(branch, layer));
    if !touched && row_enabled.is_none() {
        return act;
    }
    let rows = overrides.len().max(row_enabled.map_or(0, |r| r.len()));
    let mut mask = vec![1.0; rows * hidden];
    let mut pins = vec![0.0; rows * hidden];
    let mut any_pin = false;
    for r in 0..rows {
        if row_enabled.is_some_and(|e| !e[r]) {
            mask[r * hidden..(r + 1) * hidden].iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let Some(ov) = overrides.get(r) else { continue };
        for (n, iv) in ov.iter() {
            if n.branch != branch || n.layer != layer {
                continue;
            }
            let i = r * hidden + n.index;
            match *iv {
                Intervention::Scale(s) => mask[i] = s,
                Intervention::ForceZero => mask[i] = 0.0,
                Intervention::Pin(v) => {
                    mask[i] = 0.0;
                    pins[i] = v;
                    any_pin = true;
                }
            }
        }
    }
    let scaled = g.scale(act, Tensor::new(rows, hidden, mask).expect("mask shape"));
    if any_pin {
        let p = g.constant(Tensor::new(rows, hidden, pins).expect("pin shape"));
        g.add(scaled, p)
    } else {
        scaled
    }
}

/// Recorded activations and outputs of a single forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    /// Post-activation vectors of textual layers 1..=L^t.
    pub textual: Vec<Vec<f64>>,
    /// Post-activation vectors of visual layers 1..=L^v (zeros for text-only input).
    pub visual: Vec<Vec<f64>>,
    /// Residual stream after each textual layer.
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ForwardTrace {
    pub fn activation(&self, n: &NeuronRef) -> f64 {
        match n.branch {
            Branch::Textual => self.textual[n.layer - 1][n.index],
            Branch::Visual => self.visual[n.layer - 1][n.index],
        }
    }

    pub fn layer(&self, branch: Branch, layer: usize) -> &[f64] {
        match branch {
            Branch::Textual => &self.textual[layer - 1],
            Branch::Visual => &self.visual[layer - 1],
        }
    }
}

/// Traced forward passes over a batch of rows.
pub fn forward_rows(
    params: &ModelParams,
    rows: &[Row],
    overrides: &[ActivationOverride],
) -> Result<Vec<ForwardTrace>> {
    let mg = build_graph(params, rows, overrides)?;
    let ev = mg.forward()?;
    let h = params.config.hidden_dim;
    let logits = ev.value(mg.logits);
    let log_probs = log_softmax_rows(logits);
    Ok((0..rows.len())
        .map(|r| ForwardTrace {
            textual: mg
                .textual_acts
                .iter()
                .map(|&n| ev.value(n).row_slice(r).to_vec())
                .collect(),
            visual: mg
                .visual_acts
                .iter()
                .map(|n| match n {
                    Some(n) => ev.value(*n).row_slice(r).to_vec(),
                    None => vec![0.0; h],
                })
                .collect(),
            hidden: mg
                .hidden
                .iter()
                .map(|&n| ev.value(n).row_slice(r).to_vec())
                .collect(),
            logits: logits.row_slice(r).to_vec(),
            log_probs: log_probs.row_slice(r).to_vec(),
        })
        .collect())
}

/// Traced forward pass on an example's question (first answer position).
pub fn forward_traced(
    params: &ModelParams,
    example: &Example,
    override_: Option<&ActivationOverride>,
) -> Result<ForwardTrace> {
    let rows = [Row::from_example(example, 0)];
    let ovs: Vec<ActivationOverride> = override_.into_iter().cloned().collect();
    Ok(forward_rows(params, &rows, &ovs)?.remove(0))
}

/// `log p(y_1 | x)` on the question row, `y_1` the first gold answer token.
pub fn target_log_prob(
    params: &ModelParams,
    example: &Example,
    override_: Option<&ActivationOverride>,
) -> Result<f64> {
    let y = first_answer(example)?;
    Ok(forward_traced(params, example, override_)?.log_probs[y])
}

/// Reverse-mode `d log p(y_1 | x) / d a` for one neuron's post-activation `a`
/// on the question row.
pub fn activation_gradient(params: &ModelParams, example: &Example, neuron: &NeuronRef) -> Result<f64> {
    params.config.check_neuron(neuron)?;
    let y = first_answer(example)?;
    let mut mg = build_graph(params, &[Row::from_example(example, 0)], &[])?;
    let node = mg.act_node(neuron.branch, neuron.layer).ok_or_else(|| {
        Error::InvalidNeuron(format!("{neuron} is not computed for a text-only example"))
    })?;
    let nll = mg.graph.softmax_cross_entropy(mg.logits, vec![y], vec![1.0]);
    let ev = mg.forward()?;
    Ok(-mg.graph.grad(&ev, nll, &[node])?[0].get(0, neuron.index))
}

fn first_answer(example: &Example) -> Result<usize> {
    example
        .answer_tokens
        .first()
        .copied()
        .ok_or_else(|| Error::EmptyInput(format!("example {} has no answer", example.id)))
}

/// Fused textual-stack representation after textual layer `layer` (1-based).
pub fn hidden_rep(params: &ModelParams, example: &Example, layer: usize) -> Result<Vec<f64>> {
    let max = params.config.num_text_layers;
    if layer < 1 || layer > max {
        return Err(Error::LayerOutOfRange { layer, max });
    }
    Ok(forward_traced(params, example, None)?.hidden[layer - 1].clone())
}

/// Teacher-forced rows for every answer position of every example, with the
/// gold target and the index of the originating example.
pub(crate) fn teacher_forced_rows(examples: &[Example]) -> (Vec<Row>, Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut owner = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        for (p, &t) in e.answer_tokens.iter().enumerate() {
            rows.push(Row::from_example(e, p));
            targets.push(t);
            owner.push(i);
        }
    }
    (rows, targets, owner)
}

/// Per-position log-probability rows under teacher forcing, grouped per example.
pub fn answer_log_probs(params: &ModelParams, examples: &[Example]) -> Result<Vec<Vec<Vec<f64>>>> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let (rows, _, owner) = teacher_forced_rows(examples);
    let mg = build_graph(params, &rows, &[])?;
    let ev = mg.forward()?;
    let ls = log_softmax_rows(ev.value(mg.logits));
    let mut out = vec![Vec::new(); examples.len()];
    for (r, &i) in owner.iter().enumerate() {
        out[i].push(ls.row_slice(r).to_vec());
    }
    Ok(out)
}

/// Sequence negative log-likelihood `-sum_i log p(y_i | x, y_<i)` per example.
pub fn answer_nll(params: &ModelParams, examples: &[Example]) -> Result<Vec<f64>> {
    let lp = answer_log_probs(params, examples)?;
    Ok(examples
        .iter()
        .zip(&lp)
        .map(|(e, rows)| {
            e.answer_tokens
                .iter()
                .zip(rows)
                .map(|(&t, row)| -row[t])
                .sum()
        })
        .collect())
}

/// Mean sequence NLL over `examples` and its gradient for every parameter.
pub(crate) fn nll_and_grads(params: &ModelParams, examples: &[Example]) -> Result<(f64, Vec<Tensor>)> {
    nll_and_grads_dropout(params, examples, None)
}

fn nll_and_grads_dropout(
    params: &ModelParams,
    examples: &[Example],
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(f64, Vec<Tensor>)> {
    let (rows, targets, _) = teacher_forced_rows(examples);
    let w = 1.0 / examples.len() as f64;
    let mut mg = build_graph_with(params, &rows, &[], dropout)?;
    let loss = mg
        .graph
        .softmax_cross_entropy(mg.logits, targets, vec![w; rows.len()]);
    let ev = mg.forward()?;
    let grads = mg.graph.grad(&ev, loss, &mg.param_nodes)?;
    Ok((ev.value(loss).item(), grads))
}

/// Greedy answer decoding; each example produces as many tokens as its gold
/// answer has.
pub fn predict(params: &ModelParams, examples: &[Example]) -> Result<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); examples.len()];
    let max_len = examples.iter().map(|e| e.answer_tokens.len()).max().unwrap_or(0);
    for pos in 0..max_len {
        let active: Vec<usize> = (0..examples.len())
            .filter(|&i| examples[i].answer_tokens.len() > pos)
            .collect();
        let rows: Vec<Row> = active
            .iter()
            .map(|&i| {
                let e = &examples[i];
                let mut tokens = e.question_tokens.clone();
                tokens.extend_from_slice(&out[i]);
                Row {
                    tokens,
                    image: e.is_multimodal().then(|| e.image_vec.clone()),
                }
            })
            .collect();
        let mg = build_graph(params, &rows, &[])?;
        let ev = mg.forward()?;
        let logits = ev.value(mg.logits);
        for (r, &i) in active.iter().enumerate() {
            out[i].push(argmax(logits.row_slice(r)));
        }
    }
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Probability of dropping each FFN activation during training.
    #[serde(default)]
    pub dropout: f64,
    /// Decay the step size linearly from `lr` to `lr * final_lr_fraction`.
    #[serde(default = "one")]
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 8,
            clip_norm: Some(1.0),
            final_lr_fraction: 0.0,
            dropout: 0.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Supervised answer-NLL training with minibatch SGD and momentum.
pub fn train(params: &ModelParams, dataset: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::InvalidConfig(format!(
            "dropout must lie in [0, 1), got {}",
            cfg.dropout
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let mut params = params.clone();
    let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let total_steps = cfg.epochs * dataset.len().div_ceil(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let drop = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut rng));
            let (loss, mut grads) = nll_and_grads_dropout(&params, &batch, drop)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "train",
                    step,
                    loss,
                });
            }
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            let progress = step as f64 / total_steps as f64;
            opt.lr = cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * progress);
            opt.step(&mut params, &grads, None);
            if !params.all_finite() {
                return Err(Error::Divergence {
                    stage: "train",
                    step,
                    loss: f64::NAN,
                });
            }
            total += loss;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, CorpusConfig, Modality};

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 48,
            embed_dim: 8,
            visual_input_dim: 6,
            hidden_dim: 5,
            num_text_layers: 3,
            num_visual_layers: 2,
            answer_classes: 16,
            fusion_layer: 1,
            seed: 3,
        }
    }

    fn examples(cfg: &ModelConfig) -> Vec<Example> {
        let corpus = generate_corpus(
            &CorpusConfig {
                num_entities: 10,
                qa_per_entity: 4,
                seed: 1,
            },
            cfg,
        )
        .unwrap();
        corpus.examples()
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(&ModelConfig::default()).unwrap();
        let b = ModelParams::init(&ModelConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&ModelConfig {
            seed: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [ModelConfig::default(), small_config()] {
            let p = ModelParams::init(&cfg).unwrap();
            assert_eq!(p.parameter_count(), cfg.parameter_count());
        }
        // 64*32 + 4*(2*16*32+32+16) + 16*32+32 + 4*(2*32*32+32+32) + 32*32+32
        assert_eq!(ModelConfig::default().parameter_count(), 16384);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::default();
        c.num_text_layers = 0;
        assert!(ModelParams::init(&c).is_err());
        let mut c = ModelConfig::default();
        c.fusion_layer = 5;
        assert!(ModelParams::init(&c).is_err());
    }

    #[test]
    fn empty_and_all_ones_override_are_identity() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg).unwrap();
        for e in examples(&cfg).iter().take(4) {
            let plain = forward_traced(&p, e, None).unwrap();
            let empty = forward_traced(&p, e, Some(&ActivationOverride::new())).unwrap();
            assert_eq!(plain, empty);
            let mut ones = ActivationOverride::new();
            for n in cfg.all_neurons() {
                ones.scale(n, 1.0).unwrap();
            }
            let scaled = forward_traced(&p, e, Some(&ones)).unwrap();
            assert_eq!(plain, scaled);
        }
    }

    #[test]
    fn zeroing_every_neuron_gives_bias_only_network() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg).unwrap();
        let mut bias_only = p.clone();
        for b in bias_only.visual.iter_mut().chain(bias_only.textual.iter_mut()) {
            b.w_down.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut all_zero = ActivationOverride::new();
        for n in cfg.all_neurons() {
            all_zero.scale(n, 0.0).unwrap();
        }
        for e in examples(&cfg).iter().take(4) {
            let a = forward_traced(&p, e, Some(&all_zero)).unwrap();
            let b = forward_traced(&bias_only, e, None).unwrap();
            assert_eq!(a.logits, b.logits);
        }
    }

    #[test]
    fn partial_scale_changes_downstream() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg).unwrap();
        let ex = examples(&cfg);
        let e = ex.iter().find(|e| e.is_multimodal()).unwrap();
        let base = forward_traced(&p, e, None).unwrap();
        let n = (0..cfg.hidden_dim)
            .map(|i| NeuronRef::textual(1, i))
            .find(|n| base.activation(n) > 0.0)
            .expect("some active neuron");
        let mut ov = ActivationOverride::new();
        ov.scale(n, 0.5).unwrap();
        let t = forward_traced(&p, e, Some(&ov)).unwrap();
        assert_eq!(t.activation(&n), 0.5 * base.activation(&n));
        assert_ne!(t.textual[1], base.textual[1]);
        assert_ne!(t.logits, base.logits);
        assert_eq!(t.visual, base.visual);
    }

    #[test]
    fn override_scale_out_of_range_rejected() {
        let mut ov = ActivationOverride::new();
        assert!(ov.scale(NeuronRef::textual(1, 0), 1.5).is_err());
        assert!(ov.scale(NeuronRef::textual(1, 0), -0.1).is_err());
    }

    #[test]
    fn trace_shape_and_normalization() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg).unwrap();
        for e in examples(&cfg) {
            let t = forward_traced(&p, &e, None).unwrap();
            assert_eq!(t.textual.len() + t.visual.len(), 5);
            assert!(t.textual.iter().chain(&t.visual).all(|v| v.len() == 5));
            let s: f64 = t.log_probs.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
            if e.modality == Modality::TextOnly {
                assert!(t.visual.iter().flatten().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn batched_rows_match_single_rows() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg).unwrap();
        let ex = examples(&cfg);
        let rows: Vec<Row> = ex.iter().take(6).map(|e| Row::from_example(e, 0)).collect();
        let batch = forward_rows(&p, &rows, &[]).unwrap();
        for (e, t) in ex.iter().take(6).zip(&batch) {
            assert_eq!(&forward_traced(&p, e, None).unwrap(), t);
        }
    }

    #[test]
    fn out_of_vocabulary_rejected() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg).unwrap();
        let mut e = examples(&cfg)[0].clone();
        e.question_tokens.push(cfg.vocab_size);
        assert!(matches!(
            forward_traced(&p, &e, None),
            Err(Error::OutOfVocabulary { .. })
        ));
    }

    #[test]
    fn hidden_rep_of_zero_weight_model_is_bias() {
        let cfg = small_config();
        let mut p = ModelParams::init(&cfg).unwrap();
        let proj_b = p.visual_proj_b.clone();
        let down_b = p.textual[0].b_down.clone();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p.visual_proj_b = proj_b.clone();
        p.textual[0].b_down = down_b.clone();
        let ex = examples(&cfg);
        let text = ex.iter().find(|e| !e.is_multimodal()).unwrap();
        assert_eq!(hidden_rep(&p, text, 1).unwrap(), down_b.data());
        let mm = ex.iter().find(|e| e.is_multimodal()).unwrap();
        let expected: Vec<f64> = proj_b
            .data()
            .iter()
            .zip(down_b.data())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(hidden_rep(&p, mm, 1).unwrap(), expected);
        assert!(matches!(
            hidden_rep(&p, mm, 4),
            Err(Error::LayerOutOfRange { layer: 4, max: 3 })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = ModelParams::init(&ModelConfig::default()).unwrap();
        let text = p.to_checkpoint_json(Some("h")).unwrap();
        let back = ModelParams::from_checkpoint_json(&text).unwrap();
        assert_eq!(p, back);
        assert!(text.contains("\"format_version\":1"));
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg).unwrap();
        let out = train(
            &p,
            &examples(&cfg),
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.params, p);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg).unwrap();
        let res = train(
            &p,
            &examples(&cfg),
            &TrainConfig {
                epochs: 20,
                lr: 1e3,
                clip_norm: None,
                ..TrainConfig::default()
            },
        );
        assert!(matches!(res, Err(Error::Divergence { .. })), "{res:?}");
    }

    #[test]
    fn neuron_mask_covers_column_bias_and_row() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg).unwrap();
        let m = p.neuron_mask(&[NeuronRef::textual(2, 1)]);
        // w_up [8 x 5] column, b_up entry, w_down [5 x 8] row
        assert_eq!(m.count(), 8 + 1 + 8);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let up = names.iter().position(|n| n == "textual.2.w_up").unwrap();
        assert!(m.masks[up][1] && m.masks[up][6] && !m.masks[up][0]);
    }
}
