//! Define-then-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built once from named leaves and primitive ops, then
//! evaluated any number of times with [`Graph::forward`] followed by
//! [`Graph::backward`]. Node ids are handed out in creation order, so the
//! node list is always topologically sorted.
//!
//! ```
//! use std::collections::HashMap;
//! use blaq_core::autodiff::Graph;
//! use blaq_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let w = g.parameter("w", &[]).unwrap();
//! let loss = g.square(w).unwrap();
//! g.set_output(loss).unwrap();
//!
//! let inputs = HashMap::from([("w".to_string(), Tensor::scalar(3.0))]);
//! assert_eq!(g.forward(inputs).unwrap(), 9.0);
//! assert_eq!(g.backward().unwrap()["w"].item(), Some(6.0));
//! ```

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::tensor::{self, Tensor, TensorError};

/// Values bound to a graph's named leaves for one forward pass.
pub type Bindings = HashMap<String, Tensor>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("leaf name `{0}` is already in use")]
    DuplicateName(String),
    #[error("node id {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("binding `{0}` does not name a leaf of this graph")]
    UnknownInput(String),
    #[error("input `{name}` expects shape {expected:?}, got {actual:?}")]
    InputShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("label {label} in row {row} is not a class index below {classes}")]
    InvalidLabel { row: usize, label: f64, classes: usize },
    #[error("node {node} ({op}) produced a non-finite value")]
    NumericOverflow { node: usize, op: String },
    #[error("no output node has been set")]
    NoOutput,
    #[error("output must hold exactly one element, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("backward called before a successful forward pass")]
    BackwardBeforeForward,
    #[error("op `{0}` has no registered adjoint")]
    UnsupportedOp(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf { name: String, trainable: bool },
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Power(NodeId, f64),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: NodeId },
    Elementwise {
        input: NodeId,
        name: String,
        forward: fn(f64) -> f64,
        adjoint: Option<fn(f64) -> f64>,
    },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Power(..) => "power",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Elementwise { name, .. } => name,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf { .. } | Op::Constant(_) => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![a, b]
            }
            Op::SoftmaxCrossEntropy { logits, labels } => vec![logits, labels],
            Op::Relu(x)
            | Op::Square(x)
            | Op::Abs(x)
            | Op::Power(x, _)
            | Op::Scale(x, _)
            | Op::Shift(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Elementwise { input: x, .. } => vec![x],
        }
    }
}

#[derive(Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// A computation graph with cached forward values and reverse-mode gradients.
///
/// Each instance is single-threaded; independent graphs may run on
/// different threads.
#[derive(Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
    output: Option<NodeId>,
    values: Vec<Option<Tensor>>,
    /// Softmax probabilities kept from the forward pass of each
    /// cross-entropy node.
    probs: HashMap<NodeId, Vec<f64>>,
    grads: Vec<Option<Tensor>>,
    forwarded: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A non-trainable named input, e.g. a data batch or labels.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, GraphError> {
        self.leaf(name, shape, false)
    }

    /// A trainable named input; [`Graph::backward`] reports its gradient.
    pub fn parameter(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, GraphError> {
        self.leaf(name, shape, true)
    }

    fn leaf(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<NodeId, GraphError> {
        if self.names.contains_key(name) {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        if shape.contains(&0) {
            return Err(GraphError::ShapeMismatch {
                op: "leaf",
                detail: format!("`{name}` has a zero-sized dimension {shape:?}"),
            });
        }
        let id = self.push(
            Op::Leaf {
                name: name.to_string(),
                trainable,
            },
            shape.to_vec(),
        );
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    /// `(m×k) · (k×n) → (m×n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (sa, sb) = (self.shape_of(a)?, self.shape_of(b)?);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                detail: format!("cannot multiply {sa:?} by {sb:?}"),
            });
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        let (sx, sb) = (self.shape_of(x)?, self.shape_of(bias)?);
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(GraphError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias {sb:?} does not match rows of {sx:?}"),
            });
        }
        Ok(self.push(Op::AddBias(x, bias), sx))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(x, Op::Relu(x))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(x, Op::Square(x))
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(x, Op::Abs(x))
    }

    /// Odd power `sign(x)·|x|^p`, so non-integer `p` stays defined for
    /// negative inputs. Its derivative is `p·|x|^(p−1)`.
    pub fn power(&mut self, x: NodeId, p: f64) -> Result<NodeId, GraphError> {
        self.unary(x, Op::Power(x, p))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, GraphError> {
        self.unary(x, Op::Scale(x, c))
    }

    pub fn shift(&mut self, x: NodeId, c: f64) -> Result<NodeId, GraphError> {
        self.unary(x, Op::Shift(x, c))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.shape_of(x)?;
        Ok(self.push(Op::Sum(x), vec![]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.shape_of(x)?;
        Ok(self.push(Op::Mean(x), vec![]))
    }

    /// Mean softmax cross-entropy of `logits: B×C` against `labels: B`
    /// holding class indices as reals. Labels receive no gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: NodeId,
    ) -> Result<NodeId, GraphError> {
        let (sl, sy) = (self.shape_of(logits)?, self.shape_of(labels)?);
        if sl.len() != 2 || sy.len() != 1 || sl[0] != sy[0] {
            return Err(GraphError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits {sl:?} and labels {sy:?} disagree on batch size"),
            });
        }
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, labels }, vec![]))
    }

    /// A user-supplied elementwise map. Without an `adjoint` the node can be
    /// evaluated but [`Graph::backward`] through it fails.
    pub fn elementwise(
        &mut self,
        x: NodeId,
        name: &str,
        forward: fn(f64) -> f64,
        adjoint: Option<fn(f64) -> f64>,
    ) -> Result<NodeId, GraphError> {
        self.unary(
            x,
            Op::Elementwise {
                input: x,
                name: name.to_string(),
                forward,
                adjoint,
            },
        )
    }

    /// Marks the scalar node whose value [`Graph::forward`] returns.
    pub fn set_output(&mut self, node: NodeId) -> Result<(), GraphError> {
        let shape = self.shape_of(node)?;
        if tensor::numel(&shape) != 1 {
            return Err(GraphError::NonScalarOutput(shape));
        }
        self.output = Some(node);
        Ok(())
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_shape(&self, id: NodeId) -> Option<&[usize]> {
        self.nodes.get(id.0).map(|n| n.shape.as_slice())
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Value of a node from the latest forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of the output with respect to a node from the latest
    /// backward pass. `None` for nodes the output does not depend on
    /// through a trainable path.
    pub fn gradient(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Evaluates every node and returns the output value.
    pub fn forward(&mut self, mut inputs: Bindings) -> Result<f64, GraphError> {
        self.forwarded = false;
        self.grads.clear();
        let output = self.output.ok_or(GraphError::NoOutput)?;
        if let Some(extra) = inputs.keys().find(|k| !self.names.contains_key(*k)) {
            return Err(GraphError::UnknownInput(extra.clone()));
        }

        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        let mut probs = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = eval_node(idx, node, &values, &mut inputs, &mut probs)?;
            if !value.all_finite() {
                return Err(GraphError::NumericOverflow {
                    node: idx,
                    op: node.op.name().to_string(),
                });
            }
            values.push(Some(value));
        }
        let loss = values[output.0]
            .as_ref()
            .and_then(Tensor::item)
            .expect("output shape checked in set_output");
        self.values = values;
        self.probs = probs;
        self.forwarded = true;
        Ok(loss)
    }

    /// Propagates the output's gradient back to every trainable leaf.
    pub fn backward(&mut self) -> Result<HashMap<String, Tensor>, GraphError> {
        if !self.forwarded {
            return Err(GraphError::BackwardBeforeForward);
        }
        let output = self.output.ok_or(GraphError::NoOutput)?;
        let needs = self.needs_grad();

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(&self.nodes[output.0].shape, 1.0));
        for idx in (0..=output.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &needs, &mut grads)?;
            grads[idx] = Some(upstream);
        }

        let mut out = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                name,
                trainable: true,
            } = &node.op
            {
                let g = grads[idx].clone().unwrap_or_else(|| Tensor::zeros(&node.shape));
                out.insert(name.clone(), g);
            }
        }
        self.grads = grads;
        Ok(out)
    }

    /// Nodes with a trainable leaf somewhere upstream.
    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            needs[idx] = match &node.op {
                Op::Leaf { trainable, .. } => *trainable,
                Op::Constant(_) => false,
                Op::SoftmaxCrossEntropy { logits, .. } => needs[logits.0],
                op => op.inputs().iter().any(|i| needs[i.0]),
            };
        }
        needs
    }

    fn propagate(
        &self,
        idx: usize,
        up: &Tensor,
        needs: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<(), GraphError> {
        let node = &self.nodes[idx];
        if !needs[idx] {
            return Ok(());
        }
        let val = |id: NodeId| self.values[id.0].as_ref().expect("forward values present");
        let u = up.data();
        match &node.op {
            Op::Leaf { .. } | Op::Constant(_) => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs[a.0] {
                    let mut da = vec![0.0; m * k];
                    tensor::gemm_a_bt(m, n, k, u, val(b).data(), &mut da);
                    accumulate(grads, a, sa, da);
                }
                if needs[b.0] {
                    let mut db = vec![0.0; k * n];
                    tensor::gemm_at_b(k, m, n, val(a).data(), u, &mut db);
                    accumulate(grads, b, sb, db);
                }
            }
            &Op::AddBias(x, b) => {
                if needs[x.0] {
                    accumulate(grads, x, &node.shape, u.to_vec());
                }
                if needs[b.0] {
                    let cols = node.shape[1];
                    let mut db = vec![0.0; cols];
                    for row in u.chunks_exact(cols) {
                        for (acc, &g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    accumulate(grads, b, &self.nodes[b.0].shape, db);
                }
            }
            &Op::Add(a, b) => {
                if needs[a.0] {
                    accumulate(grads, a, &node.shape, u.to_vec());
                }
                if needs[b.0] {
                    accumulate(grads, b, &node.shape, u.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if needs[a.0] {
                    accumulate(grads, a, &node.shape, u.to_vec());
                }
                if needs[b.0] {
                    accumulate(grads, b, &node.shape, u.iter().map(|g| -g).collect());
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                if needs[a.0] {
                    let da = u.iter().zip(vb).map(|(g, y)| g * y).collect();
                    accumulate(grads, a, &node.shape, da);
                }
                if needs[b.0] {
                    let db = u.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(grads, b, &node.shape, db);
                }
            }
            &Op::Relu(x) => {
                let d = zip_map(u, val(x).data(), |g, x| if x > 0.0 { g } else { 0.0 });
                accumulate(grads, x, &node.shape, d);
            }
            &Op::Square(x) => {
                let d = zip_map(u, val(x).data(), |g, x| 2.0 * x * g);
                accumulate(grads, x, &node.shape, d);
            }
            &Op::Abs(x) => {
                let d = zip_map(u, val(x).data(), |g, x| g * sign_or_zero(x));
                accumulate(grads, x, &node.shape, d);
            }
            &Op::Power(x, p) => {
                let d = zip_map(u, val(x).data(), |g, x| g * p * x.abs().powf(p - 1.0));
                accumulate(grads, x, &node.shape, d);
            }
            &Op::Scale(x, c) => {
                accumulate(grads, x, &node.shape, u.iter().map(|g| g * c).collect());
            }
            &Op::Shift(x, _) => {
                accumulate(grads, x, &node.shape, u.to_vec());
            }
            &Op::Sum(x) => {
                let shape = &self.nodes[x.0].shape;
                accumulate(grads, x, shape, vec![u[0]; tensor::numel(shape)]);
            }
            &Op::Mean(x) => {
                let shape = &self.nodes[x.0].shape;
                let n = tensor::numel(shape);
                accumulate(grads, x, shape, vec![u[0] / n as f64; n]);
            }
            &Op::SoftmaxCrossEntropy { logits, labels } => {
                let shape = &self.nodes[logits.0].shape;
                let (batch, classes) = (shape[0], shape[1]);
                let probs = &self.probs[&NodeId(idx)];
                let ys = val(labels).data();
                let scale = u[0] / batch as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &y) in ys.iter().enumerate() {
                    d[row * classes + y as usize] -= scale;
                }
                accumulate(grads, logits, shape, d);
            }
            Op::Elementwise {
                input,
                name,
                adjoint,
                ..
            } => {
                let adjoint = adjoint.ok_or_else(|| GraphError::UnsupportedOp(name.clone()))?;
                let d = zip_map(u, val(*input).data(), |g, x| g * adjoint(x));
                accumulate(grads, *input, &node.shape, d);
            }
        }
        Ok(())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.forwarded = false;
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: NodeId) -> Result<Vec<usize>, GraphError> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.clone())
            .ok_or(GraphError::UnknownNode(id.0))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>, GraphError> {
        let (sa, sb) = (self.shape_of(a)?, self.shape_of(b)?);
        if sa != sb {
            return Err(GraphError::ShapeMismatch {
                op,
                detail: format!("operands have shapes {sa:?} and {sb:?}"),
            });
        }
        Ok(sa)
    }

    fn unary(&mut self, x: NodeId, op: Op) -> Result<NodeId, GraphError> {
        let shape = self.shape_of(x)?;
        Ok(self.push(op, shape))
    }

    /// Names of all trainable leaves, in creation order.
    pub fn parameter_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Leaf {
                    name,
                    trainable: true,
                } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    /// Names of all leaves that must be bound for a forward pass.
    pub fn input_names(&self) -> HashSet<String> {
        self.names.keys().cloned().collect()
    }
}

fn eval_node(
    idx: usize,
    node: &Node,
    values: &[Option<Tensor>],
    inputs: &mut Bindings,
    probs: &mut HashMap<NodeId, Vec<f64>>,
) -> Result<Tensor, GraphError> {
    let val = |id: NodeId| values[id.0].as_ref().expect("inputs precede consumers");
    let map = |x: NodeId, f: &dyn Fn(f64) -> f64| -> Result<Tensor, GraphError> {
        let data = val(x).data().iter().map(|&v| f(v)).collect();
        Ok(Tensor::from_parts(node.shape.clone(), data)?)
    };
    match &node.op {
        Op::Leaf { name, .. } => {
            let t = inputs
                .remove(name)
                .ok_or_else(|| GraphError::UnboundInput(name.clone()))?;
            if t.shape() != node.shape.as_slice() {
                return Err(GraphError::InputShape {
                    name: name.clone(),
                    expected: node.shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
            Ok(t)
        }
        Op::Constant(t) => Ok(t.clone()),
        &Op::MatMul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let mut out = vec![0.0; m * n];
            tensor::gemm(m, k, n, va.data(), vb.data(), &mut out);
            Ok(Tensor::from_parts(node.shape.clone(), out)?)
        }
        &Op::AddBias(x, b) => {
            let bias = val(b).data();
            let mut out = val(x).data().to_vec();
            for row in out.chunks_exact_mut(bias.len()) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
            Ok(Tensor::from_parts(node.shape.clone(), out)?)
        }
        &Op::Add(a, b) => binary(node, val(a), val(b), |x, y| x + y),
        &Op::Sub(a, b) => binary(node, val(a), val(b), |x, y| x - y),
        &Op::Mul(a, b) => binary(node, val(a), val(b), |x, y| x * y),
        &Op::Relu(x) => map(x, &|v| v.max(0.0)),
        &Op::Square(x) => map(x, &|v| v * v),
        &Op::Abs(x) => map(x, &f64::abs),
        &Op::Power(x, p) => map(x, &|v| sign_or_zero(v) * v.abs().powf(p)),
        &Op::Scale(x, c) => map(x, &|v| v * c),
        &Op::Shift(x, c) => map(x, &|v| v + c),
        &Op::Sum(x) => Ok(Tensor::scalar(val(x).data().iter().sum())),
        &Op::Mean(x) => {
            let v = val(x);
            Ok(Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64))
        }
        &Op::SoftmaxCrossEntropy { logits, labels } => {
            let z = val(logits);
            let (batch, classes) = (z.shape()[0], z.shape()[1]);
            let ys = val(labels).data();
            let mut p = vec![0.0; batch * classes];
            let mut total = 0.0;
            for (row, (zr, pr)) in z
                .data()
                .chunks_exact(classes)
                .zip(p.chunks_exact_mut(classes))
                .enumerate()
            {
                let y = ys[row];
                if y.fract() != 0.0 || y < 0.0 || y >= classes as f64 {
                    return Err(GraphError::InvalidLabel {
                        row,
                        label: y,
                        classes,
                    });
                }
                let max = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (pv, &zv) in pr.iter_mut().zip(zr) {
                    *pv = (zv - max).exp();
                    denom += *pv;
                }
                for pv in pr.iter_mut() {
                    *pv /= denom;
                }
                total += denom.ln() + max - zr[y as usize];
            }
            probs.insert(NodeId(idx), p);
            Ok(Tensor::scalar(total / batch as f64))
        }
        Op::Elementwise { input, forward, .. } => map(*input, &|v| forward(v)),
    }
}

fn binary(node: &Node, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, GraphError> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(node.shape.clone(), data)?)
}

fn zip_map(up: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    up.iter().zip(x).map(|(&g, &v)| f(g, v)).collect()
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::from_parts(shape.to_vec(), delta).expect("adjoint shape matches node"));
        }
    }
}

fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
