use std::collections::HashMap;

use super::graph::{Bindings, Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference estimate `(f(x+eps) - f(x-eps)) / (2 eps)` of the scalar
/// `root` with respect to every coordinate of each node in `wrt`.
///
/// Internal nodes are perturbed by substituting their value during the forward
/// pass, so downstream nodes are recomputed from the perturbed value.
pub fn finite_diff_grad(
    graph: &Graph,
    inputs: &Bindings,
    root: NodeId,
    wrt: &[NodeId],
    epsilon: f64,
) -> Result<Vec<Tensor>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference epsilon must be positive, got {epsilon}"
        )));
    }
    let base = graph.forward(inputs)?;
    if !base.value(root).is_scalar() {
        return Err(Error::RootNotScalar(root.0));
    }
    let mut out = Vec::with_capacity(wrt.len());
    for &node in wrt {
        let value = base.value(node).clone();
        let mut g = Tensor::zeros(value.rows(), value.cols());
        for i in 0..value.len() {
            g.data_mut()[i] = central_difference(graph, inputs, root, node, &value, i, epsilon)?;
        }
        out.push(g);
    }
    Ok(out)
}

/// Central difference along a single coordinate of one node.
pub fn finite_diff_coordinate(
    graph: &Graph,
    inputs: &Bindings,
    root: NodeId,
    node: NodeId,
    index: usize,
    epsilon: f64,
) -> Result<f64> {
    let base = graph.forward(inputs)?;
    let value = base.value(node).clone();
    if index >= value.len() {
        return Err(Error::InvalidConfig(format!(
            "coordinate {index} out of range for node {} with {} values",
            node.0,
            value.len()
        )));
    }
    central_difference(graph, inputs, root, node, &value, index, epsilon)
}

fn central_difference(
    graph: &Graph,
    inputs: &Bindings,
    root: NodeId,
    node: NodeId,
    value: &Tensor,
    index: usize,
    epsilon: f64,
) -> Result<f64> {
    let eval_at = |delta: f64| -> Result<f64> {
        let mut v = value.clone();
        v.data_mut()[index] += delta;
        let mut replace = HashMap::new();
        replace.insert(node, v);
        let ev = graph.forward_with(inputs, &replace)?;
        Ok(ev.value(root).item())
    };
    Ok((eval_at(epsilon)? - eval_at(-epsilon)?) / (2.0 * epsilon))
}
