use std::sync::Arc;

use super::array::{Array, SparseMatrix};
use super::kernels;
use super::DiffError;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Abs,
    Sin,
    Cos,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Abs => "abs",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
        }
    }
}

/// One recorded operation. Binary elementwise ops follow right-aligned
/// broadcasting of their operands.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf {
        name: String,
        differentiable: bool,
    },
    Constant(Arc<Array>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `scale · x + offset`, elementwise.
    Affine {
        input: NodeId,
        scale: f64,
        offset: f64,
    },
    /// `[m, k] × [k, n]`.
    MatMul(NodeId, NodeId),
    /// `x · w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// `tanh(x·w + b)`.
    LinearTanh {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// `tanh(a + b)` with `b` broadcast to `a`.
    AddTanh(NodeId, NodeId),
    /// Broadcast to the node's shape.
    Broadcast(NodeId),
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    /// Sum over one axis, which is removed from the shape.
    SumAxis {
        input: NodeId,
        axis: usize,
    },
    Unary(NodeId, UnaryOp),
    Clamp {
        input: NodeId,
        lo: f64,
        hi: f64,
    },
    /// `y[.., i] = Σ_{j<i} x[.., j]` along the last axis.
    CumSumExclusive(NodeId),
    /// Fixed sparse linear map applied to the leading axis of `[cols, channels]`.
    SparseMatMul {
        matrix: Arc<SparseMatrix>,
        input: NodeId,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::LinearTanh { .. } => "linear_tanh",
            Op::AddTanh(..) => "add_tanh",
            Op::Broadcast(_) => "broadcast",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Unary(_, u) => u.name(),
            Op::Clamp { .. } => "clamp",
            Op::CumSumExclusive(_) => "cumsum_exclusive",
            Op::SparseMatMul { .. } => "sparse_matmul",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Constant(_) => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddTanh(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } | Op::LinearTanh { x, w, b } => vec![*x, *w, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Affine { input, .. }
            | Op::SumAxis { input, .. }
            | Op::Clamp { input, .. }
            | Op::SparseMatMul { input, .. } => vec![*input],
            Op::Broadcast(a) | Op::Reshape(a) | Op::Sum(a) | Op::Mean(a) | Op::Unary(a, _) | Op::CumSumExclusive(a) => {
                vec![*a]
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
}

/// A topologically ordered tape of operation records.
///
/// Nodes can only refer to nodes created before them, so the insertion order
/// is a valid evaluation order. Operations whose inputs are all constants are
/// evaluated while the graph is built and recorded as constants.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// All leaves in creation order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn differentiable_leaves(&self) -> Vec<NodeId> {
        self.leaves
            .iter()
            .copied()
            .filter(|&id| {
                matches!(
                    self.nodes[id].op,
                    Op::Leaf {
                        differentiable: true,
                        ..
                    }
                )
            })
            .collect()
    }

    pub fn is_constant(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].op, Op::Constant(_))
    }

    pub fn leaf(&mut self, name: impl Into<String>, shape: &[usize], differentiable: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf {
                name: name.into(),
                differentiable,
            },
            shape: shape.to_vec(),
        });
        self.leaves.push(id);
        id
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Array>) -> NodeId {
        let shape = value.shape().to_vec();
        self.nodes.push(Node {
            op: Op::Constant(value),
            shape,
        });
        self.nodes.len() - 1
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Array::scalar(value))
    }

    fn check_id(&self, id: NodeId) -> Result<(), DiffError> {
        if id < self.nodes.len() {
            Ok(())
        } else {
            Err(DiffError::UnknownNode(id))
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        let inputs = op.inputs();
        let foldable = !inputs.is_empty() && inputs.iter().all(|&i| self.is_constant(i));
        if foldable {
            let values: Vec<&Array> = inputs
                .iter()
                .map(|&i| match &self.nodes[i].op {
                    Op::Constant(v) => v.as_ref(),
                    _ => unreachable!(),
                })
                .collect();
            let out = kernels::forward(&op, &values, &shape)?;
            if !out.all_finite() {
                return Err(DiffError::NonFinite {
                    node: self.nodes.len(),
                    op: op.name(),
                });
            }
            return Ok(self.constant(out));
        }
        self.nodes.push(Node { op, shape });
        Ok(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, make: fn(NodeId, NodeId) -> Op) -> Result<NodeId, DiffError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let shape = broadcast_shapes(self.shape(a), self.shape(b))?;
        self.push(make(a, b), shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, Op::Mul)
    }

    pub fn affine(&mut self, input: NodeId, scale: f64, offset: f64) -> Result<NodeId, DiffError> {
        self.check_id(input)?;
        let shape = self.shape(input).to_vec();
        self.push(Op::Affine { input, scale, offset }, shape)
    }

    pub fn scale(&mut self, input: NodeId, scale: f64) -> Result<NodeId, DiffError> {
        self.affine(input, scale, 0.0)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.affine(input, -1.0, 1.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch(format!("matmul of {sa:?} and {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        self.push(Op::MatMul(a, b), shape)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let shape = self.linear_shape(x, w, b)?;
        self.push(Op::Linear { x, w, b }, shape)
    }

    /// Fused `tanh(linear(x, w, b))`.
    pub fn linear_tanh(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let shape = self.linear_shape(x, w, b)?;
        self.push(Op::LinearTanh { x, w, b }, shape)
    }

    /// Fused `tanh(add(a, b))`; the result must have the shape of `a`.
    pub fn add_tanh(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let shape = broadcast_shapes(self.shape(a), self.shape(b))?;
        if shape != self.shape(a) {
            return Err(DiffError::ShapeMismatch(format!(
                "add_tanh broadcasts {:?} up to {shape:?}",
                self.shape(a)
            )));
        }
        self.push(Op::AddTanh(a, b), shape)
    }

    fn linear_shape(&self, x: NodeId, w: NodeId, b: NodeId) -> Result<Vec<usize>, DiffError> {
        for id in [x, w, b] {
            self.check_id(id)?;
        }
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(DiffError::ShapeMismatch(format!(
                "linear with x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        Ok(vec![sx[0], sw[1]])
    }

    pub fn broadcast(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.check_id(input)?;
        let out = broadcast_shapes(self.shape(input), shape)?;
        if out != shape {
            return Err(DiffError::ShapeMismatch(format!(
                "cannot broadcast {:?} to {shape:?}",
                self.shape(input)
            )));
        }
        self.push(Op::Broadcast(input), shape.to_vec())
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.check_id(input)?;
        let n: usize = shape.iter().product();
        let m: usize = self.shape(input).iter().product();
        if n != m {
            return Err(DiffError::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(input)
            )));
        }
        self.push(Op::Reshape(input), shape.to_vec())
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, DiffError> {
        let first = *inputs
            .first()
            .ok_or_else(|| DiffError::ShapeMismatch("concat of zero inputs".into()))?;
        for &id in inputs {
            self.check_id(id)?;
        }
        let mut shape = self.shape(first).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::ShapeMismatch(format!("concat axis {axis} for {shape:?}")));
        }
        shape[axis] = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible =
                s.len() == shape.len() && s.iter().zip(&shape).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(DiffError::ShapeMismatch(format!(
                    "concat of {:?} and {s:?} along axis {axis}",
                    self.shape(first)
                )));
            }
            shape[axis] += s[axis];
        }
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
        )
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.check_id(input)?;
        self.push(Op::Sum(input), Vec::new())
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.check_id(input)?;
        self.push(Op::Mean(input), Vec::new())
    }

    pub fn sum_axis(&mut self, input: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        self.check_id(input)?;
        let mut shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::ShapeMismatch(format!("sum over axis {axis} of {shape:?}")));
        }
        shape.remove(axis);
        self.push(Op::SumAxis { input, axis }, shape)
    }

    pub fn unary(&mut self, input: NodeId, op: UnaryOp) -> Result<NodeId, DiffError> {
        self.check_id(input)?;
        let shape = self.shape(input).to_vec();
        self.push(Op::Unary(input, op), shape)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryOp::Tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryOp::Sigmoid)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryOp::Softplus)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryOp::Exp)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryOp::Log)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryOp::Abs)
    }

    pub fn sin(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryOp::Sin)
    }

    pub fn cos(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryOp::Cos)
    }

    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> Result<NodeId, DiffError> {
        self.check_id(input)?;
        if lo > hi {
            return Err(DiffError::ShapeMismatch(format!(
                "clamp interval [{lo}, {hi}] is empty"
            )));
        }
        let shape = self.shape(input).to_vec();
        self.push(Op::Clamp { input, lo, hi }, shape)
    }

    pub fn cumsum_exclusive(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.check_id(input)?;
        let shape = self.shape(input).to_vec();
        if shape.is_empty() {
            return Err(DiffError::ShapeMismatch("cumsum of a scalar".into()));
        }
        self.push(Op::CumSumExclusive(input), shape)
    }

    /// Applies `matrix` to `input` of shape `[cols]` or `[cols, channels]`.
    pub fn sparse_matmul(&mut self, matrix: Arc<SparseMatrix>, input: NodeId) -> Result<NodeId, DiffError> {
        self.check_id(input)?;
        let s = self.shape(input);
        let shape = match s {
            [c] if *c == matrix.cols() => vec![matrix.rows()],
            [c, ch] if *c == matrix.cols() => vec![matrix.rows(), *ch],
            _ => {
                return Err(DiffError::ShapeMismatch(format!(
                    "sparse {}x{} applied to {s:?}",
                    matrix.rows(),
                    matrix.cols()
                )))
            }
        };
        self.push(Op::SparseMatMul { matrix, input }, shape)
    }
}

/// Right-aligned broadcasting of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>, DiffError> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(DiffError::ShapeMismatch(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}
