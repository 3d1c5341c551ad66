//! Greedy layer-by-layer influential path search.
//!
//! Starting from an empty prefix, layer `l` contributes the neuron whose
//! addition maximizes the branch score (IGI for textual, IFI for visual) of
//! the prefix plus that neuron. Selections are never revisited.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{score_sets, AttributionConfig, Target};
use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::model::{build_graph, forward_traced, ActivationOverride, Branch, ModelParams, NeuronRef, Row};

/// Largest hidden width the exhaustive oracle accepts.
pub const ORACLE_MAX_HIDDEN: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronPath {
    pub branch: Branch,
    /// One neuron per layer, layers `1..=N` in order.
    pub selections: Vec<NeuronRef>,
    /// Score of every candidate at each greedy step (`[layer][index]`).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_scores: Vec<Vec<f64>>,
}

impl NeuronPath {
    pub fn indices(&self) -> Vec<usize> {
        self.selections.iter().map(|n| n.index).collect()
    }

    /// Build a path from bare indices (layer `i + 1` selects `indices[i]`).
    pub fn from_indices(branch: Branch, indices: &[usize]) -> Self {
        Self {
            branch,
            selections: indices
                .iter()
                .enumerate()
                .map(|(i, &index)| NeuronRef {
                    branch,
                    layer: i + 1,
                    index,
                })
                .collect(),
            candidate_scores: Vec::new(),
        }
    }
}

/// Paths found for one example; text-only examples have no visual path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExamplePaths {
    pub example_id: usize,
    pub textual: NeuronPath,
    pub visual: Option<NeuronPath>,
}

/// Per (branch, layer) neuron indices to prune.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PruneSet {
    pub top_k: usize,
    pub entries: BTreeMap<Branch, Vec<Vec<usize>>>,
}

impl PruneSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Explicit neuron list, grouped per layer.
    pub fn from_neurons(neurons: &[NeuronRef], params: &ModelParams) -> Self {
        let mut entries: BTreeMap<Branch, Vec<Vec<usize>>> = BTreeMap::new();
        for n in neurons {
            let layers = entries
                .entry(n.branch)
                .or_insert_with(|| vec![Vec::new(); params.config.depth(n.branch)]);
            if n.layer >= 1 && n.layer <= layers.len() && !layers[n.layer - 1].contains(&n.index) {
                layers[n.layer - 1].push(n.index);
                layers[n.layer - 1].sort_unstable();
            }
        }
        let top_k = entries.values().flatten().map(Vec::len).max().unwrap_or(0);
        Self { top_k, entries }
    }

    pub fn neurons(&self) -> Vec<NeuronRef> {
        let mut out = Vec::new();
        for (&branch, layers) in &self.entries {
            for (l, idx) in layers.iter().enumerate() {
                for &index in idx {
                    out.push(NeuronRef {
                        branch,
                        layer: l + 1,
                        index,
                    });
                }
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.entries.values().flatten().all(Vec::is_empty)
    }

    pub fn layer(&self, branch: Branch, layer: usize) -> &[usize] {
        self.entries
            .get(&branch)
            .and_then(|l| l.get(layer - 1))
            .map_or(&[], Vec::as_slice)
    }
}

/// Greedy path search for one example.
pub fn locate_paths(
    params: &ModelParams,
    example: &Example,
    cfg: &AttributionConfig,
) -> Result<ExamplePaths> {
    let textual = greedy(params, example, cfg, Target::Probability)?;
    let visual = if example.is_multimodal() {
        Some(greedy(params, example, cfg, Target::LogLikelihood)?)
    } else {
        None
    };
    Ok(ExamplePaths {
        example_id: example.id,
        textual,
        visual,
    })
}

/// [`locate_paths`] over many examples, in input order.
pub fn locate_all(
    params: &ModelParams,
    examples: &[Example],
    cfg: &AttributionConfig,
) -> Result<Vec<ExamplePaths>> {
    examples
        .par_iter()
        .map(|e| locate_paths(params, e, cfg))
        .collect()
}

fn greedy(
    params: &ModelParams,
    example: &Example,
    cfg: &AttributionConfig,
    target: Target,
) -> Result<NeuronPath> {
    let branch = match target {
        Target::Probability => Branch::Textual,
        Target::LogLikelihood => Branch::Visual,
    };
    let horizon = cfg.horizon(params, branch)?;
    let h = params.config.hidden_dim;
    let mut prefix: Vec<NeuronRef> = Vec::with_capacity(horizon);
    let mut candidate_scores = Vec::with_capacity(horizon);
    for layer in 1..=horizon {
        let sets: Vec<Vec<NeuronRef>> = (0..h)
            .map(|index| {
                let mut s = prefix.clone();
                s.push(NeuronRef {
                    branch,
                    layer,
                    index,
                });
                s
            })
            .collect();
        let scores: Vec<f64> = score_sets(params, example, &sets, cfg, target)?
            .into_iter()
            .map(|s| s.value)
            .collect();
        let best = first_max(&scores);
        prefix.push(NeuronRef {
            branch,
            layer,
            index: best,
        });
        candidate_scores.push(scores);
    }
    Ok(NeuronPath {
        branch,
        selections: prefix,
        candidate_scores,
    })
}

/// Index of the largest value; the lowest index wins ties.
fn first_max(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Reference implementation of the greedy search. Every candidate at every
/// layer is rescored from scratch, one frame per forward pass, with
/// gradients taken through a scalar cross-entropy root.
pub fn oracle_locate(
    params: &ModelParams,
    example: &Example,
    cfg: &AttributionConfig,
) -> Result<ExamplePaths> {
    let h = params.config.hidden_dim;
    if h > ORACLE_MAX_HIDDEN {
        return Err(Error::SizeGuard(format!(
            "oracle enumeration needs hidden_dim <= {ORACLE_MAX_HIDDEN}, got {h}"
        )));
    }
    let run = |branch: Branch| -> Result<NeuronPath> {
        let horizon = cfg.horizon(params, branch)?;
        let mut chosen: Vec<usize> = Vec::new();
        for layer in 1..=horizon {
            let mut best: Option<(usize, f64)> = None;
            for cand in 0..h {
                let mut path: Vec<NeuronRef> = chosen
                    .iter()
                    .enumerate()
                    .map(|(i, &index)| NeuronRef {
                        branch,
                        layer: i + 1,
                        index,
                    })
                    .collect();
                path.push(NeuronRef {
                    branch,
                    layer,
                    index: cand,
                });
                let s = reference_score(params, example, &path, cfg.steps, branch)?;
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((cand, s));
                }
            }
            chosen.push(best.expect("hidden_dim >= 1").0);
        }
        Ok(NeuronPath::from_indices(branch, &chosen))
    };
    let textual = run(Branch::Textual)?;
    let visual = if example.is_multimodal() {
        Some(run(Branch::Visual)?)
    } else {
        None
    };
    Ok(ExamplePaths {
        example_id: example.id,
        textual,
        visual,
    })
}

/// Straight-line frame loop. Textual: `dp/dw = -p * dCE/dw`.
/// Visual: `G = -(1/P) sum_i CE_i`, so `dG/dz = -dCE_w/dz` with weights `1/P`.
fn reference_score(
    params: &ModelParams,
    example: &Example,
    path: &[NeuronRef],
    steps: usize,
    branch: Branch,
) -> Result<f64> {
    let base = forward_traced(params, example, None)?;
    let positions = match branch {
        Branch::Textual => 1,
        Branch::Visual => example.answer_tokens.len(),
    };
    let mut integral = 0.0;
    for k in 0..steps {
        let frac = (k as f64 + 0.5) / steps as f64;
        let mut ov = ActivationOverride::new();
        for n in path {
            ov.pin(*n, frac * base.activation(n));
        }
        let rows: Vec<Row> = (0..positions).map(|p| Row::from_example(example, p)).collect();
        let ovs = vec![ov; positions];
        let mut mg = build_graph(params, &rows, &ovs)?;
        let targets = example.answer_tokens[..positions].to_vec();
        let weight = 1.0 / positions as f64;
        let ce = mg
            .graph
            .softmax_cross_entropy(mg.logits, targets, vec![weight; positions]);
        let ev = mg.graph.forward(&mg.bindings)?;
        for n in path {
            let node = mg.act_node(branch, n.layer).expect("branch in graph");
            let g = mg.graph.grad(&ev, ce, &[node])?.remove(0);
            let d_ce: f64 = (0..positions).map(|p| g.get(p, n.index)).sum();
            integral += match branch {
                Branch::Textual => -(-ev.value(ce).item()).exp() * d_ce,
                Branch::Visual => d_ce * d_ce,
            };
        }
    }
    integral /= steps as f64;
    Ok(path.iter().map(|n| base.activation(n) * integral).sum())
}

/// Combine per-example paths into one prune set: per (branch, layer) the
/// `top_k` most frequently selected indices. Frequency ties go to the larger
/// summed normalized candidate score, then to the lowest index.
pub fn aggregate(paths: &[ExamplePaths], top_k: usize) -> Result<PruneSet> {
    if top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be at least 1".into()));
    }
    let ranked = rank_layers(paths)?;
    let mut entries = BTreeMap::new();
    for (branch, layers) in ranked {
        let mut chosen_layers = Vec::with_capacity(layers.len());
        for order in layers {
            if top_k > order.len() {
                return Err(Error::InvalidConfig(format!(
                    "top_k {top_k} exceeds hidden width {}",
                    order.len()
                )));
            }
            let mut chosen: Vec<usize> = order[..top_k].iter().map(|r| r.index).collect();
            chosen.sort_unstable();
            chosen_layers.push(chosen);
        }
        entries.insert(branch, chosen_layers);
    }
    Ok(PruneSet { top_k, entries })
}

/// One neuron's standing in the aggregation order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedNeuron {
    pub index: usize,
    /// Number of paths selecting it.
    pub count: usize,
    /// Candidate score summed over paths, each path's layer scaled to max |s| = 1.
    pub weight: f64,
}

/// Every index of every (branch, layer), most important first under the
/// aggregation order.
pub fn rank_layers(paths: &[ExamplePaths]) -> Result<BTreeMap<Branch, Vec<Vec<RankedNeuron>>>> {
    if paths.is_empty() {
        return Err(Error::EmptyInput("no paths to aggregate".into()));
    }
    let mut out = BTreeMap::new();
    let textual: Vec<&NeuronPath> = paths.iter().map(|p| &p.textual).collect();
    out.insert(Branch::Textual, rank_branch(&textual)?);
    let visual: Vec<&NeuronPath> = paths.iter().filter_map(|p| p.visual.as_ref()).collect();
    if !visual.is_empty() {
        out.insert(Branch::Visual, rank_branch(&visual)?);
    }
    Ok(out)
}

/// Selected neurons across all layers and branches, ordered by frequency,
/// then weight, then neuron order.
pub fn rank_neurons(paths: &[ExamplePaths]) -> Result<Vec<NeuronRef>> {
    let mut all = Vec::new();
    for (branch, layers) in rank_layers(paths)? {
        for (l, order) in layers.into_iter().enumerate() {
            for r in order.into_iter().filter(|r| r.count > 0) {
                all.push((NeuronRef { branch, layer: l + 1, index: r.index }, r.count, r.weight));
            }
        }
    }
    all.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
    Ok(all.into_iter().map(|(n, _, _)| n).collect())
}

fn rank_branch(paths: &[&NeuronPath]) -> Result<Vec<Vec<RankedNeuron>>> {
    let layers = paths[0].selections.len();
    if paths.iter().any(|p| p.selections.len() != layers) {
        return Err(Error::InvalidConfig("paths of unequal length".into()));
    }
    let width = paths
        .iter()
        .flat_map(|p| p.selections.iter().map(|n| n.index + 1))
        .chain(paths.iter().flat_map(|p| p.candidate_scores.iter().map(Vec::len)))
        .max()
        .unwrap_or(0);
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut count = vec![0usize; width];
        let mut weight = vec![0.0f64; width];
        for p in paths {
            count[p.selections[l].index] += 1;
            if let Some(scores) = p.candidate_scores.get(l) {
                let scale = scores.iter().fold(0.0f64, |a, s| a.max(s.abs()));
                if scale > 0.0 {
                    for (i, s) in scores.iter().enumerate() {
                        weight[i] += s / scale;
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|&a, &b| {
            count[b]
                .cmp(&count[a])
                .then(weight[b].total_cmp(&weight[a]))
                .then(a.cmp(&b))
        });
        out.push(
            order
                .into_iter()
                .map(|index| RankedNeuron {
                    index,
                    count: count[index],
                    weight: weight[index],
                })
                .collect(),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, CorpusConfig};
    use crate::model::ModelConfig;

    fn setup(hidden: usize, seed: u64) -> (ModelParams, Vec<Example>) {
        let cfg = ModelConfig {
            vocab_size: 40,
            embed_dim: 6,
            visual_input_dim: 5,
            hidden_dim: hidden,
            num_text_layers: 3,
            num_visual_layers: 3,
            answer_classes: 12,
            fusion_layer: 1,
            seed,
        };
        let corpus = generate_corpus(
            &CorpusConfig {
                num_entities: 10,
                qa_per_entity: 4,
                seed,
            },
            &cfg,
        )
        .unwrap();
        (ModelParams::init(&cfg).unwrap(), corpus.examples())
    }

    fn small_cfg() -> AttributionConfig {
        AttributionConfig {
            steps: 8,
            layer_horizon: None,
        }
    }

    #[test]
    fn single_neuron_layers_give_unique_path() {
        let (p, ex) = setup(1, 0);
        let e = ex.iter().find(|e| e.is_multimodal()).unwrap();
        let paths = locate_paths(&p, e, &small_cfg()).unwrap();
        assert_eq!(paths.textual.indices(), vec![0, 0, 0]);
        assert_eq!(paths.visual.unwrap().indices(), vec![0, 0, 0]);
        let o = oracle_locate(&p, e, &small_cfg()).unwrap();
        assert_eq!(o.textual.indices(), vec![0, 0, 0]);
    }

    #[test]
    fn greedy_matches_oracle() {
        for seed in 0..3 {
            let (p, ex) = setup(4, seed);
            for e in ex.iter().take(4) {
                let g = locate_paths(&p, e, &small_cfg()).unwrap();
                let o = oracle_locate(&p, e, &small_cfg()).unwrap();
                assert_eq!(g.textual.indices(), o.textual.indices());
                assert_eq!(
                    g.visual.as_ref().map(NeuronPath::indices),
                    o.visual.as_ref().map(NeuronPath::indices)
                );
            }
        }
    }

    #[test]
    fn text_only_example_has_no_visual_path() {
        let (p, ex) = setup(3, 1);
        let e = ex.iter().find(|e| !e.is_multimodal()).unwrap();
        assert!(locate_paths(&p, e, &small_cfg()).unwrap().visual.is_none());
    }

    #[test]
    fn oracle_guard() {
        let (p, ex) = setup(9, 0);
        assert!(matches!(
            oracle_locate(&p, &ex[0], &small_cfg()),
            Err(Error::SizeGuard(_))
        ));
    }

    #[test]
    fn deterministic() {
        let (p, ex) = setup(5, 2);
        let a = locate_all(&p, &ex[..3], &small_cfg()).unwrap();
        let b = locate_all(&p, &ex[..3], &small_cfg()).unwrap();
        assert_eq!(a, b);
    }

    fn bare(id: usize, t: &[usize], v: Option<&[usize]>) -> ExamplePaths {
        ExamplePaths {
            example_id: id,
            textual: NeuronPath::from_indices(Branch::Textual, t),
            visual: v.map(|v| NeuronPath::from_indices(Branch::Visual, v)),
        }
    }

    #[test]
    fn aggregate_single_example_is_its_path() {
        let ps = aggregate(&[bare(0, &[3, 1], Some(&[2, 0]))], 1).unwrap();
        assert_eq!(ps.entries[&Branch::Textual], vec![vec![3], vec![1]]);
        assert_eq!(ps.entries[&Branch::Visual], vec![vec![2], vec![0]]);
    }

    #[test]
    fn aggregate_majority() {
        let paths = [bare(0, &[2], None), bare(1, &[2], None), bare(2, &[5], None)];
        let ps = aggregate(&paths, 1).unwrap();
        assert_eq!(ps.layer(Branch::Textual, 1), &[2]);
        assert!(!ps.entries.contains_key(&Branch::Visual));
        let ps = aggregate(&paths, 2).unwrap();
        assert_eq!(ps.layer(Branch::Textual, 1), &[2, 5]);
    }

    #[test]
    fn aggregate_errors() {
        assert!(aggregate(&[], 1).is_err());
        assert!(aggregate(&[bare(0, &[0], None)], 0).is_err());
    }

    #[test]
    fn prune_set_neuron_round_trip() {
        let (p, _) = setup(4, 0);
        let ns = vec![NeuronRef::textual(1, 3), NeuronRef::visual(2, 1), NeuronRef::textual(1, 0)];
        let ps = PruneSet::from_neurons(&ns, &p);
        let mut back = ps.neurons();
        back.sort();
        let mut want = ns.clone();
        want.sort();
        assert_eq!(back, want);
    }
}
