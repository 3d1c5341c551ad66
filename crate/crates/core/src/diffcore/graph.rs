use std::collections::{BTreeMap, HashMap};

use super::tensor::{log_softmax_rows, matmul, matmul_transpose_a, matmul_transpose_b, Tensor};
use crate::error::{Error, Result};

/// Index of a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// The fixed primitive set.
#[derive(Clone, Debug)]
pub enum Op {
    /// Placeholder bound by name at evaluation time.
    Input(String),
    Constant(Tensor),
    MatMul,
    /// Elementwise sum; the right operand may be a single row broadcast over
    /// the rows of the left operand.
    Add,
    Relu,
    /// Elementwise product with constant factors (scalar or same shape).
    Scale(Tensor),
    /// `sum_r weights[r] * -log softmax(logits_r)[targets[r]]`, a scalar.
    SoftmaxCrossEntropy {
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    /// Row-wise concatenation.
    Concat,
    /// Mean over consecutive row segments; `segments[i]` rows form output row `i`.
    MeanPool { segments: Vec<usize> },
    /// `sum (a - b)^2`, a scalar.
    SquaredDistance,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Relu => "relu",
            Op::Scale(_) => "scale",
            Op::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
            Op::Concat => "concat",
            Op::MeanPool { .. } => "mean-pool",
            Op::SquaredDistance => "squared-distance",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// A DAG of primitive operations. Nodes can only reference earlier nodes, so
/// construction order is a valid evaluation order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Named input bindings for [`Graph::forward`].
pub type Bindings = BTreeMap<String, Tensor>;

/// Cached node values of one forward execution.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { op, inputs });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()), vec![])
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value), vec![])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu, vec![a])
    }

    pub fn scale(&mut self, a: NodeId, factors: Tensor) -> NodeId {
        self.push(Op::Scale(factors), vec![a])
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { targets, weights }, vec![logits])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat, parts.to_vec())
    }

    pub fn mean_pool(&mut self, a: NodeId, segments: Vec<usize>) -> NodeId {
        self.push(Op::MeanPool { segments }, vec![a])
    }

    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::SquaredDistance, vec![a, b])
    }

    /// Evaluate every node in construction order.
    pub fn forward(&self, inputs: &Bindings) -> Result<Evaluation> {
        self.forward_with(inputs, &HashMap::new())
    }

    /// Forward pass where the values of the nodes in `replace` are substituted
    /// for their computed values; downstream nodes see the substitutes.
    pub fn forward_with(
        &self,
        inputs: &Bindings,
        replace: &HashMap<NodeId, Tensor>,
    ) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = eval_node(idx, node, &values, inputs)?;
            let value = match replace.get(&NodeId(idx)) {
                Some(sub) => {
                    if sub.shape() != value.shape() {
                        return Err(shape_err(
                            idx,
                            node.op.name(),
                            format!(
                                "replacement shape {:?} differs from computed {:?}",
                                sub.shape(),
                                value.shape()
                            ),
                        ));
                    }
                    sub.clone()
                }
                None => value,
            };
            values.push(value);
        }
        Ok(Evaluation { values })
    }

    /// Reverse-mode gradient of the scalar `root` with respect to the values of
    /// each node in `wrt`.
    pub fn grad(&self, eval: &Evaluation, root: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let root_value = eval
            .values
            .get(root.0)
            .ok_or(Error::UnknownNode(root.0))?;
        if !root_value.is_scalar() {
            return Err(Error::RootNotScalar(root.0));
        }
        self.grad_seeded(eval, root, &Tensor::scalar(1.0), wrt)
    }

    /// Vector-Jacobian product: gradient of `sum(seed * value(root))`.
    pub fn grad_seeded(
        &self,
        eval: &Evaluation,
        root: NodeId,
        seed: &Tensor,
        wrt: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        let n = self.nodes.len();
        if root.0 >= n || eval.values.len() != n {
            return Err(Error::UnknownNode(root.0));
        }
        if let Some(bad) = wrt.iter().find(|id| id.0 >= n) {
            return Err(Error::UnknownNode(bad.0));
        }
        if seed.shape() != eval.values[root.0].shape() {
            return Err(shape_err(
                root.0,
                "seed",
                format!(
                    "seed shape {:?} differs from root {:?}",
                    seed.shape(),
                    eval.values[root.0].shape()
                ),
            ));
        }

        // Only propagate into inputs that lead to a requested node.
        let mut relevant = vec![false; n];
        for id in wrt {
            relevant[id.0] = true;
        }
        for idx in 0..=root.0 {
            if !relevant[idx] && self.nodes[idx].inputs.iter().any(|i| relevant[i.0]) {
                relevant[idx] = true;
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[root.0] = Some(seed.clone());
        for idx in (0..=root.0).rev() {
            if !relevant[idx] {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            for (slot, input) in node.inputs.iter().enumerate() {
                if !relevant[input.0] {
                    continue;
                }
                let g = backward_input(node, slot, &upstream, &eval.values, idx);
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    none => *none = Some(g),
                }
            }
            grads[idx] = Some(upstream);
        }

        Ok(wrt
            .iter()
            .map(|id| {
                grads[id.0].clone().unwrap_or_else(|| {
                    let s = eval.values[id.0].shape();
                    Tensor::zeros(s[0], s[1])
                })
            })
            .collect())
    }
}

fn shape_err(node: usize, op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { node, op, detail }
}

fn eval_node(idx: usize, node: &Node, values: &[Tensor], inputs: &Bindings) -> Result<Tensor> {
    let arg = |i: usize| &values[node.inputs[i].0];
    let op = node.op.name();
    let out = match &node.op {
        Op::Input(name) => inputs
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnboundInput(name.clone()))?,
        Op::Constant(t) => t.clone(),
        Op::MatMul => {
            let (a, b) = (arg(0), arg(1));
            if a.cols() != b.rows() {
                return Err(shape_err(
                    idx,
                    op,
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            matmul(a, b)
        }
        Op::Add => {
            let (a, b) = (arg(0), arg(1));
            let mut out = a.clone();
            if a.shape() == b.shape() {
                out.add_assign(b);
            } else if b.rows() == 1 && b.cols() == a.cols() {
                for r in 0..out.rows() {
                    for (o, v) in out.row_slice_mut(r).iter_mut().zip(b.data()) {
                        *o += v;
                    }
                }
            } else {
                return Err(shape_err(
                    idx,
                    op,
                    format!("{:?} + {:?}", a.shape(), b.shape()),
                ));
            }
            out
        }
        Op::Relu => {
            let mut out = arg(0).clone();
            for v in out.data_mut() {
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
            out
        }
        Op::Scale(f) => {
            let a = arg(0);
            let mut out = a.clone();
            if f.is_scalar() {
                let s = f.item();
                out.data_mut().iter_mut().for_each(|v| *v *= s);
            } else if f.shape() == a.shape() {
                for (o, s) in out.data_mut().iter_mut().zip(f.data()) {
                    *o *= s;
                }
            } else {
                return Err(shape_err(
                    idx,
                    op,
                    format!("factors {:?} vs operand {:?}", f.shape(), a.shape()),
                ));
            }
            out
        }
        Op::SoftmaxCrossEntropy { targets, weights } => {
            let logits = arg(0);
            if targets.len() != logits.rows() || weights.len() != logits.rows() {
                return Err(shape_err(
                    idx,
                    op,
                    format!(
                        "{} rows but {} targets / {} weights",
                        logits.rows(),
                        targets.len(),
                        weights.len()
                    ),
                ));
            }
            if let Some(t) = targets.iter().find(|&&t| t >= logits.cols()) {
                return Err(shape_err(
                    idx,
                    op,
                    format!("target {t} >= {} classes", logits.cols()),
                ));
            }
            let ls = log_softmax_rows(logits);
            let total = targets
                .iter()
                .zip(weights)
                .enumerate()
                .map(|(r, (&t, &w))| -w * ls.get(r, t))
                .sum();
            Tensor::scalar(total)
        }
        Op::Concat => {
            if node.inputs.is_empty() {
                return Err(shape_err(idx, op, "no operands".into()));
            }
            let cols = arg(0).cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for i in 0..node.inputs.len() {
                let t = arg(i);
                if t.cols() != cols {
                    return Err(shape_err(
                        idx,
                        op,
                        format!("operand {i} has {} columns, expected {cols}", t.cols()),
                    ));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(rows, cols, data)?
        }
        Op::MeanPool { segments } => {
            let a = arg(0);
            if segments.iter().sum::<usize>() != a.rows() || segments.contains(&0) {
                return Err(shape_err(
                    idx,
                    op,
                    format!("segments {segments:?} do not tile {} rows", a.rows()),
                ));
            }
            let mut out = Tensor::zeros(segments.len(), a.cols());
            let mut start = 0;
            for (s, &len) in segments.iter().enumerate() {
                let orow = out.row_slice_mut(s);
                for r in start..start + len {
                    for (o, v) in orow.iter_mut().zip(a.row_slice(r)) {
                        *o += v;
                    }
                }
                let inv = 1.0 / len as f64;
                orow.iter_mut().for_each(|v| *v *= inv);
                start += len;
            }
            out
        }
        Op::SquaredDistance => {
            let (a, b) = (arg(0), arg(1));
            if a.shape() != b.shape() {
                return Err(shape_err(
                    idx,
                    op,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let d = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Tensor::scalar(d)
        }
    };
    Ok(out)
}

/// Contribution of `upstream` (gradient at `node`'s output) to input `slot`.
fn backward_input(node: &Node, slot: usize, upstream: &Tensor, values: &[Tensor], idx: usize) -> Tensor {
    let arg = |i: usize| &values[node.inputs[i].0];
    match &node.op {
        Op::Input(_) | Op::Constant(_) => unreachable!("leaf nodes have no inputs"),
        Op::MatMul => {
            if slot == 0 {
                matmul_transpose_b(upstream, arg(1))
            } else {
                matmul_transpose_a(arg(0), upstream)
            }
        }
        Op::Add => {
            let target = arg(slot);
            if target.shape() == upstream.shape() {
                upstream.clone()
            } else {
                // broadcast row: sum over rows
                let mut g = Tensor::zeros(1, upstream.cols());
                for r in 0..upstream.rows() {
                    for (o, v) in g.data_mut().iter_mut().zip(upstream.row_slice(r)) {
                        *o += v;
                    }
                }
                g
            }
        }
        Op::Relu => {
            let out = &values[idx];
            let mut g = upstream.clone();
            for (gv, ov) in g.data_mut().iter_mut().zip(out.data()) {
                if *ov <= 0.0 {
                    *gv = 0.0;
                }
            }
            g
        }
        Op::Scale(f) => {
            let mut g = upstream.clone();
            if f.is_scalar() {
                let s = f.item();
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            } else {
                for (gv, s) in g.data_mut().iter_mut().zip(f.data()) {
                    *gv *= s;
                }
            }
            g
        }
        Op::SoftmaxCrossEntropy { targets, weights } => {
            let up = upstream.item();
            let logits = arg(0);
            let mut g = log_softmax_rows(logits);
            for r in 0..g.rows() {
                let w = weights[r] * up;
                let row = g.row_slice_mut(r);
                for v in row.iter_mut() {
                    *v = v.exp() * w;
                }
                row[targets[r]] -= w;
            }
            g
        }
        Op::Concat => {
            let offset: usize = (0..slot).map(|i| arg(i).rows()).sum();
            let t = arg(slot);
            let cols = t.cols();
            let data = upstream.data()[offset * cols..(offset + t.rows()) * cols].to_vec();
            Tensor::new(t.rows(), cols, data).expect("concat slice")
        }
        Op::MeanPool { segments } => {
            let a = arg(0);
            let mut g = Tensor::zeros(a.rows(), a.cols());
            let mut start = 0;
            for (s, &len) in segments.iter().enumerate() {
                let inv = 1.0 / len as f64;
                let up = upstream.row_slice(s);
                for r in start..start + len {
                    for (o, v) in g.row_slice_mut(r).iter_mut().zip(up) {
                        *o = v * inv;
                    }
                }
                start += len;
            }
            g
        }
        Op::SquaredDistance => {
            let (a, b) = (arg(0), arg(1));
            let sign = if slot == 0 { 2.0 } else { -2.0 };
            let up = upstream.item() * sign;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * up)
                .collect();
            Tensor::new(a.rows(), a.cols(), data).expect("squared-distance grad")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(t(1, 2, &[1.0, 2.0]));
        let b = g.constant(t(2, 1, &[3.0, 4.0]));
        let c = g.matmul(a, b);
        let ev = g.forward(&Bindings::new()).unwrap();
        assert_eq!(ev.value(c).data(), &[11.0]);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let a = g.constant(t(1, 3, &[-1.0, 0.0, 2.0]));
        let r = g.relu(a);
        let ev = g.forward(&Bindings::new()).unwrap();
        assert_eq!(ev.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_cross_entropy_is_ln2() {
        let mut g = Graph::new();
        let a = g.constant(t(1, 2, &[0.0, 0.0]));
        let l = g.softmax_cross_entropy(a, vec![0], vec![1.0]);
        let ev = g.forward(&Bindings::new()).unwrap();
        assert!((ev.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn square_via_scale_and_matmul() {
        // x^2 = (x) * (x) with x bound as [1,1].
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.matmul(x, x);
        let mut b = Bindings::new();
        b.insert("x".into(), Tensor::scalar(3.0));
        let ev = g.forward(&b).unwrap();
        let dx = g.grad(&ev, y, &[x]).unwrap();
        assert_eq!(dx[0].item(), 6.0);

        // 0.5 * 2 * x * x through a scale node
        let mut g2 = Graph::new();
        let x2 = g2.input("x");
        let s = g2.scale(x2, Tensor::scalar(2.0));
        let y2 = g2.matmul(s, x2);
        let h = g2.scale(y2, Tensor::scalar(0.5));
        let ev2 = g2.forward(&b).unwrap();
        assert_eq!(g2.grad(&ev2, h, &[x2]).unwrap()[0].item(), 6.0);
    }

    #[test]
    fn dead_branch_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let unused = g.input("z");
        let y = g.squared_distance(x, x);
        let mut b = Bindings::new();
        b.insert("x".into(), t(1, 2, &[1.0, 2.0]));
        b.insert("z".into(), t(1, 3, &[1.0, 2.0, 3.0]));
        let ev = g.forward(&b).unwrap();
        let gz = g.grad(&ev, y, &[unused]).unwrap();
        assert_eq!(gz[0], Tensor::zeros(1, 3));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.constant(t(1, 2, &[1.0, 2.0]));
        let b = g.constant(t(3, 1, &[1.0, 2.0, 3.0]));
        let _ = g.matmul(a, b);
        match g.forward(&Bindings::new()) {
            Err(Error::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn unbound_input_and_unknown_node() {
        let mut g = Graph::new();
        let x = g.input("x");
        assert!(matches!(
            g.forward(&Bindings::new()),
            Err(Error::UnboundInput(_))
        ));
        let mut b = Bindings::new();
        b.insert("x".into(), t(1, 2, &[1.0, 2.0]));
        let ev = g.forward(&b).unwrap();
        assert!(matches!(g.grad(&ev, x, &[x]), Err(Error::RootNotScalar(0))));
        let s = Tensor::zeros(1, 2);
        assert!(matches!(
            g.grad_seeded(&ev, x, &s, &[NodeId(9)]),
            Err(Error::UnknownNode(9))
        ));
    }

    #[test]
    fn concat_and_mean_pool() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.concat(&[a, b]);
        let m = g.mean_pool(c, vec![1, 2]);
        let w = g.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let l = g.squared_distance(m, w);
        let mut bind = Bindings::new();
        bind.insert("a".into(), t(1, 2, &[1.0, 1.0]));
        bind.insert("b".into(), t(2, 2, &[2.0, 4.0, 6.0, 8.0]));
        let ev = g.forward(&bind).unwrap();
        assert_eq!(ev.value(m).data(), &[1.0, 1.0, 4.0, 6.0]);
        // d/db of (mean - w)^2 for segment 2: 2*(m-w)/2 per row
        let gb = g.grad(&ev, l, &[b]).unwrap();
        assert_eq!(gb[0].data(), &[1.0, 2.0, 1.0, 2.0]);
    }
}
