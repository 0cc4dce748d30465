//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a tape of explicit operation records built once and then
//! evaluated any number of times with different leaf values. [`evaluate`]
//! runs the forward pass and keeps every intermediate; [`backward`] walks
//! the tape in reverse from a scalar output.

mod array;
mod graph;
mod kernels;

use std::collections::HashMap;
use std::sync::Arc;

pub use array::{Array, SparseMatrix};
pub use graph::{broadcast_shapes, Graph, Node, NodeId, Op, UnaryOp};
pub(crate) use kernels::sigmoid;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { node: NodeId, op: &'static str },
    #[error("output node {node} has shape {shape:?}, expected a scalar")]
    NotScalar { node: NodeId, shape: Vec<usize> },
    #[error("no value supplied for leaf {0}")]
    MissingLeaf(NodeId),
    #[error("node {0} is not a leaf of this graph")]
    NotALeaf(NodeId),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
}

/// Leaf values keyed by leaf node id.
pub type LeafValues = HashMap<NodeId, Array>;

/// Forward values of every node of one evaluation.
#[derive(Clone, Debug)]
pub struct Values {
    values: Vec<Arc<Array>>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Array {
        &self.values[id]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id].item()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Gradients of a scalar output with respect to leaves.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Array>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Array> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Array> {
        self.grads.remove(&leaf)
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads.keys().copied()
    }
}

/// Runs the forward pass. Every leaf must have a value of its declared shape.
pub fn evaluate(graph: &Graph, leaf_values: &LeafValues) -> Result<Values, DiffError> {
    let mut values: Vec<Arc<Array>> = Vec::with_capacity(graph.len());
    for (id, node) in graph.nodes().iter().enumerate() {
        let value = match &node.op {
            Op::Leaf { .. } => {
                let v = leaf_values.get(&id).ok_or(DiffError::MissingLeaf(id))?;
                if v.shape() != node.shape.as_slice() {
                    return Err(DiffError::ShapeMismatch(format!(
                        "leaf {id} declared {:?} but given {:?}",
                        node.shape,
                        v.shape()
                    )));
                }
                if !v.all_finite() {
                    return Err(DiffError::NonFinite { node: id, op: "leaf" });
                }
                Arc::new(v.clone())
            }
            Op::Constant(c) => Arc::clone(c),
            op => {
                let inputs: Vec<&Array> = op.inputs().iter().map(|&i| values[i].as_ref()).collect();
                let out = kernels::forward(op, &inputs, &node.shape)?;
                if !out.all_finite() {
                    return Err(DiffError::NonFinite {
                        node: id,
                        op: op.name(),
                    });
                }
                Arc::new(out)
            }
        };
        values.push(value);
    }
    Ok(Values { values })
}

/// Gradient of scalar node `output` with respect to every differentiable leaf.
/// Leaves the output does not depend on get a zero gradient.
pub fn backward(graph: &Graph, values: &Values, output: NodeId) -> Result<Gradients, DiffError> {
    let leaves = graph.differentiable_leaves();
    backward_wrt(graph, values, output, &leaves)
}

/// Like [`backward`], restricted to the given leaves. Work is only done on
/// nodes that lie on a path from one of `wrt` to `output`.
pub fn backward_wrt(graph: &Graph, values: &Values, output: NodeId, wrt: &[NodeId]) -> Result<Gradients, DiffError> {
    if output >= graph.len() {
        return Err(DiffError::UnknownNode(output));
    }
    let out_shape = graph.shape(output);
    if out_shape.iter().product::<usize>() != 1 {
        return Err(DiffError::NotScalar {
            node: output,
            shape: out_shape.to_vec(),
        });
    }
    for &leaf in wrt {
        if leaf >= graph.len() || !matches!(graph.node(leaf).op, Op::Leaf { .. }) {
            return Err(DiffError::NotALeaf(leaf));
        }
    }

    // Nodes downstream of a requested leaf.
    let mut active = vec![false; graph.len()];
    for &leaf in wrt {
        active[leaf] = true;
    }
    for (id, node) in graph.nodes().iter().enumerate() {
        if !active[id] && node.op.inputs().iter().any(|&i| active[i]) {
            active[id] = true;
        }
    }

    let mut adjoints: Vec<Option<Array>> = vec![None; graph.len()];
    if active[output] {
        adjoints[output] = Some(Array::full(out_shape, 1.0));
    }
    for id in (0..=output).rev() {
        let Some(g) = adjoints[id].take() else { continue };
        let node = graph.node(id);
        if let Op::Leaf { .. } = node.op {
            adjoints[id] = Some(g);
            continue;
        }
        let inputs = node.op.inputs();
        let input_values: Vec<&Array> = inputs.iter().map(|&i| values.get(i)).collect();
        for (which, &input) in inputs.iter().enumerate() {
            if !active[input] {
                continue;
            }
            let contribution = kernels::vjp(&node.op, &input_values, values.get(id), &g, which);
            match &mut adjoints[input] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        }
    }

    let mut grads = HashMap::new();
    for &leaf in wrt {
        let g = adjoints[leaf].take().unwrap_or_else(|| Array::zeros(graph.shape(leaf)));
        grads.insert(leaf, g);
    }
    Ok(Gradients { grads })
}

/// Compares the analytic gradient of `output` with respect to `leaf` against
/// central differences of step `step`. Returns the maximum over leaf entries
/// of `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_difference_check(
    graph: &Graph,
    leaf_values: &LeafValues,
    output: NodeId,
    leaf: NodeId,
    step: f64,
) -> Result<f64, DiffError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let values = evaluate(graph, leaf_values)?;
    let analytic = backward_wrt(graph, &values, output, &[leaf])?
        .take(leaf)
        .expect("requested leaf gradient");
    let mut probe = leaf_values.clone();
    let base = leaf_values.get(&leaf).ok_or(DiffError::MissingLeaf(leaf))?.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[i] += step;
        probe.insert(leaf, plus);
        let f_plus = evaluate(graph, &probe)?.scalar(output);
        let mut minus = base.clone();
        minus.data_mut()[i] -= step;
        probe.insert(leaf, minus);
        let f_minus = evaluate(graph, &probe)?.scalar(output);
        let numeric = (f_plus - f_minus) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
