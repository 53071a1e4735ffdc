//! Reverse-mode automatic differentiation on small dense tensors.
//!
//! Forward evaluation is eager: every operation validates its input shapes,
//! computes its output immediately, and records itself on a tape ([`Graph`]).
//! [`Graph::backward`] walks the tape in reverse from a scalar output and
//! accumulates vector-Jacobian products into every node that was built from
//! a gradient-enabled leaf.
//!
//! The operation set is exactly what the training losses in this crate need:
//! dense matmul, elementwise arithmetic, a few nonlinearities, full and
//! row-wise reductions, column concatenation, and a fused softmax +
//! log-sum-exp cross-entropy. Everything is `f64`: desk-scale problems here
//! prefer checkable numerics over throughput.
//!
//! Randomness never enters the graph. Noise (latent ε draws, randomized
//! targets) is sampled outside and inserted as constant leaves, so every
//! recorded loss is a deterministic function of its leaves and can be
//! verified against central finite differences ([`finite_difference_check`]).

mod check;
mod op;

pub use check::{check_scalar_graph, finite_difference_check};
pub use op::CeTarget;
pub(crate) use op::kernels;

use op::Op;
use thiserror::Error;

/// Errors from tensor construction, graph building, and gradient checking.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape { op: &'static str, expected: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} does not match {len} values")]
    ShapeLenMismatch { shape: Vec<usize>, len: usize },
    #[error("empty tensors are not supported")]
    Empty,
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("log of non-positive value {value}")]
    LogDomain { value: f64 },
    #[error("node index {index} does not belong to this graph")]
    UnknownNode { index: usize },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("soft target row {row} is not a probability vector")]
    InvalidTarget { row: usize },
    #[error("{targets} target rows do not match {rows} logit rows")]
    TargetCount { targets: usize, rows: usize },
    #[error("gradient length {grad} does not match point length {point}")]
    LengthMismatch { grad: usize, point: usize },
    #[error("finite differences need a positive step, got {eps}")]
    BadStep { eps: f64 },
    #[error("non-finite function value while probing coordinate {index}")]
    NonFiniteProbe { index: usize },
}

/// Dense row-major tensor of finite `f64` values, rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, rejecting empty shapes, shape/value length mismatches,
    /// and non-finite values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, DiffError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(DiffError::Empty);
        }
        if numel != data.len() {
            return Err(DiffError::ShapeLenMismatch { shape: shape.to_vec(), len: data.len() });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DiffError::NonFinite { op: "tensor construction" });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Single-element tensor of shape `[1]`. Panics on a non-finite value.
    pub fn scalar(v: f64) -> Self {
        assert!(v.is_finite(), "scalar tensors must be finite, got {v}");
        Self { shape: vec![1], data: vec![v] }
    }

    /// Rank-1 tensor from a value vector.
    pub fn vector(data: Vec<f64>) -> Result<Self, DiffError> {
        let n = data.len();
        Self::new(&[n], data)
    }

    /// Rank-2 tensor from row-major values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DiffError> {
        Self::new(&[rows, cols], data)
    }

    /// All-zero tensor. Panics on an empty shape (internal construction only).
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && numel > 0, "zeros needs a non-empty shape");
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty tensors
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor. Panics otherwise.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    /// Row `i` of a rank-2 tensor. Panics out of range or on rank 1.
    pub fn row(&self, i: usize) -> &[f64] {
        let (r, c) = self.dims2().expect("row() needs a rank-2 tensor");
        assert!(i < r, "row {i} out of range for {r} rows");
        &self.data[i * c..(i + 1) * c]
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Eager-forward tape. Operations append nodes; inputs always precede their
/// consumers, so reverse index order is a valid reverse-topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Graph::backward`] call, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward output with respect to `id`, if that node
    /// required gradients and was reachable from the output.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
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

    /// Leaf that never receives gradients (inputs, labels, frozen noise).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Convenience scalar constant.
    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf that accumulates gradients (trainable parameters).
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Value of a node. Panics on a foreign id.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn tensor(&self, id: NodeId) -> Result<&Tensor, DiffError> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(DiffError::UnknownNode { index: id.0 })
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Append a computed node, enforcing the all-finite output invariant.
    fn push_op(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId, DiffError> {
        if !value.data.iter().all(|v| v.is_finite()) {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        Ok(self.push(op, value, requires_grad))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let v = kernels::matmul(self.tensor(a)?, self.tensor(b)?)?;
        let rg = self.requires(a) || self.requires(b);
        self.push_op(Op::Matmul(a, b), v, rg)
    }

    /// Elementwise sum; also accepts matrix + row-vector bias broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let v = kernels::add(self.tensor(a)?, self.tensor(b)?)?;
        let rg = self.requires(a) || self.requires(b);
        self.push_op(Op::Add(a, b), v, rg)
    }

    /// Elementwise difference of same-shape tensors.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let v = kernels::sub(self.tensor(a)?, self.tensor(b)?)?;
        let rg = self.requires(a) || self.requires(b);
        self.push_op(Op::Sub(a, b), v, rg)
    }

    /// Hadamard product of same-shape tensors.
    pub fn mul_elementwise(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let v = kernels::mul(self.tensor(a)?, self.tensor(b)?)?;
        let rg = self.requires(a) || self.requires(b);
        self.push_op(Op::MulElementwise(a, b), v, rg)
    }

    /// Multiply every element by a fixed scalar.
    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> Result<NodeId, DiffError> {
        if !c.is_finite() {
            return Err(DiffError::NonFinite { op: "scalar_mul" });
        }
        let v = kernels::map(self.tensor(x)?, |v| v * c);
        let rg = self.requires(x);
        self.push_op(Op::ScalarMul(x, c), v, rg)
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let v = kernels::map(self.tensor(x)?, |v| v.max(0.0));
        let rg = self.requires(x);
        self.push_op(Op::Relu(x), v, rg)
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let v = kernels::map(self.tensor(x)?, f64::tanh);
        let rg = self.requires(x);
        self.push_op(Op::Tanh(x), v, rg)
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let v = kernels::map(self.tensor(x)?, f64::exp);
        let rg = self.requires(x);
        self.push_op(Op::Exp(x), v, rg)
    }

    /// Elementwise natural log; errors on any non-positive element.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let t = self.tensor(x)?;
        if let Some(&bad) = t.data().iter().find(|v| **v <= 0.0) {
            return Err(DiffError::LogDomain { value: bad });
        }
        let v = kernels::map(t, f64::ln);
        let rg = self.requires(x);
        self.push_op(Op::Log(x), v, rg)
    }

    /// Elementwise square.
    pub fn square(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let v = kernels::map(self.tensor(x)?, |v| v * v);
        let rg = self.requires(x);
        self.push_op(Op::Square(x), v, rg)
    }

    /// Mean of all elements (scalar output).
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let t = self.tensor(x)?;
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.requires(x);
        self.push_op(Op::Mean(x), Tensor::scalar_unchecked(m), rg)
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let t = self.tensor(x)?;
        let s = t.data().iter().sum::<f64>();
        let rg = self.requires(x);
        self.push_op(Op::Sum(x), Tensor::scalar_unchecked(s), rg)
    }

    /// Euclidean norm per row of a rank-2 tensor ([B×d] → [B]); a rank-1
    /// input yields its norm as a scalar.
    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let v = kernels::l2_norm_rows(self.tensor(x)?);
        let rg = self.requires(x);
        self.push_op(Op::L2Norm(x), v, rg)
    }

    /// Column-wise concatenation of two rank-2 tensors with equal row counts
    /// (rank-1 inputs concatenate end to end).
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let v = kernels::concat_cols(self.tensor(a)?, self.tensor(b)?)?;
        let rg = self.requires(a) || self.requires(b);
        self.push_op(Op::Concat(a, b), v, rg)
    }

    /// Fused softmax + log-sum-exp cross-entropy, averaged over rows.
    ///
    /// The log-sum-exp is max-shifted, so the value is invariant (to roundoff)
    /// under adding a constant to every logit of a row. Targets are either
    /// class indices or per-row probability vectors; the gradient over each
    /// logit row is `(softmax(row) − target) / rows`.
    pub fn softmax_logsumexp_ce(&mut self, logits: NodeId, target: CeTarget) -> Result<NodeId, DiffError> {
        let t = self.tensor(logits)?;
        let v = op::ce_forward(t, &target)?;
        let rg = self.requires(logits);
        self.push_op(Op::SoftmaxCe(logits, target), Tensor::scalar_unchecked(v), rg)
    }

    /// Reverse pass from a scalar output node.
    ///
    /// Returns the gradient of `output` with respect to every
    /// gradient-enabled node reachable from it (leaves included). Each call
    /// starts from fresh accumulators; calling twice gives identical results.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, DiffError> {
        let out = self.tensor(output)?;
        if !out.is_scalar() {
            return Err(DiffError::NonScalarOutput { shape: out.shape().to_vec() });
        }
        let mut bufs: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            bufs[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let Some(grad) = bufs[i].take() else { continue };
            op::accumulate(self, i, &grad, &mut bufs);
            bufs[i] = Some(grad);
        }
        let grads = bufs
            .into_iter()
            .enumerate()
            .map(|(i, b)| {
                b.map(|data| Tensor {
                    shape: self.nodes[i].value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    pub(crate) fn node_op(&self, index: usize) -> &Op {
        &self.nodes[index].op
    }

    pub(crate) fn node_value(&self, index: usize) -> &Tensor {
        &self.nodes[index].value
    }

    pub(crate) fn node_requires_grad(&self, index: usize) -> bool {
        self.nodes[index].requires_grad
    }
}

impl Tensor {
    /// Internal: scalar whose finiteness is checked by `push_op` instead.
    pub(crate) fn scalar_unchecked(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_shape_must_match_values() {
        let err = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, DiffError::ShapeLenMismatch { len: 3, .. }));
    }

    #[test]
    fn tensor_rejects_empty_and_non_finite() {
        assert!(matches!(Tensor::new(&[0], vec![]), Err(DiffError::Empty)));
        assert!(matches!(Tensor::new(&[], vec![]), Err(DiffError::Empty)));
        assert!(Tensor::new(&[1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn matmul_by_identity_is_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let out = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(g.value(out).shape(), &[2, 3]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6]));
        let b = g.constant(t(&[2, 2], &[0.0; 4]));
        assert!(matches!(
            g.matmul(a, b),
            Err(DiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_of_non_positive_is_a_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(DiffError::LogDomain { value }) if value == 0.0));
    }

    #[test]
    fn bias_broadcast_adds_row_vector_to_each_row() {
        let mut g = Graph::new();
        let a = g.parameter(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.parameter(t(&[2], &[10.0, 20.0]));
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        // Bias gradient is the column sum of the upstream gradient.
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.parameter(t(&[1], &[3.0]));
        let sq = g.square(x).unwrap();
        let out = g.sum(sq).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.parameter(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.mean(x).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn fanout_accumulates_like_square() {
        // x ⊙ x reaches x through two paths; the accumulated gradient must
        // equal the single-path gradient of square(x).
        let point = [0.7, -1.3, 2.1];
        let mut g = Graph::new();
        let x = g.parameter(t(&[3], &point));
        let prod = g.mul_elementwise(x, x).unwrap();
        let out = g.sum(prod).unwrap();
        let via_mul = g.backward(out).unwrap().get(x).unwrap().clone();

        let mut h = Graph::new();
        let x2 = h.parameter(t(&[3], &point));
        let sq = h.square(x2).unwrap();
        let out2 = h.sum(sq).unwrap();
        let via_square = h.backward(out2).unwrap().get(x2).unwrap().clone();
        assert_eq!(via_mul.data(), via_square.data());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[5.0, 5.0]));
        let y = g.mul_elementwise(x, c).unwrap();
        let out = g.sum(y).unwrap();
        let grads = g.backward(out).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut g = Graph::new();
        let x = g.parameter(t(&[2], &[1.0, 2.0]));
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(DiffError::NonScalarOutput { .. })));
    }

    #[test]
    fn repeated_backward_calls_agree() {
        let mut g = Graph::new();
        let x = g.parameter(t(&[2], &[0.3, -0.4]));
        let y = g.tanh(x).unwrap();
        let out = g.sum(y).unwrap();
        let first = g.backward(out).unwrap().get(x).unwrap().clone();
        let second = g.backward(out).unwrap().get(x).unwrap().clone();
        assert_eq!(first.data(), second.data());
    }

    #[test]
    fn l2_norm_is_row_wise() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 2.0]));
        let n = g.l2_norm(x).unwrap();
        assert_eq!(n_data(&g, n), vec![5.0, 2.0]);

        let v = g.constant(t(&[2], &[3.0, 4.0]));
        let nv = g.l2_norm(v).unwrap();
        assert_eq!(n_data(&g, nv), vec![5.0]);
    }

    fn n_data(g: &Graph, id: NodeId) -> Vec<f64> {
        g.value(id).data().to_vec()
    }

    #[test]
    fn concat_splits_gradient_by_column_block() {
        let mut g = Graph::new();
        let a = g.parameter(t(&[2, 1], &[1.0, 2.0]));
        let b = g.parameter(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let cat = g.concat(a, b).unwrap();
        assert_eq!(g.value(cat).shape(), &[2, 3]);
        assert_eq!(g.value(cat).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        // Weight the concatenated entries to make the split visible.
        let w = g.constant(t(&[2, 3], &[1.0, 10.0, 100.0, 1000.0, 1e4, 1e5]));
        let weighted = g.mul_elementwise(cat, w).unwrap();
        let out = g.sum(weighted).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1000.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[10.0, 100.0, 1e4, 1e5]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_k() {
        let mut g = Graph::new();
        let logits = g.constant(t(&[1, 4], &[0.0, 0.0, 0.0, 0.0]));
        let ce = g.softmax_logsumexp_ce(logits, CeTarget::Labels(vec![2])).unwrap();
        assert!((g.value(ce).item() - 4.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        // Hand oracle at logits [1, 2, 3], label 0:
        //   exps = (e, e², e³) = (2.718281828…, 7.389056099…, 20.08553692…)
        //   Z = 30.19287485…, p = (0.09003057, 0.24472847, 0.66524096)
        let mut g = Graph::new();
        let logits = g.parameter(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let ce = g.softmax_logsumexp_ce(logits, CeTarget::Labels(vec![0])).unwrap();
        let grads = g.backward(ce).unwrap();
        let got = grads.get(logits).unwrap().data().to_vec();
        let expect = [0.09003057317038046 - 1.0, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        let raw = [0.3, -1.7, 2.2, 0.9];
        for c in [-50.0, 3.75, 137.5] {
            let mut g = Graph::new();
            let a = g.constant(t(&[1, 4], &raw));
            let shifted: Vec<f64> = raw.iter().map(|v| v + c).collect();
            let b = g.constant(t(&[1, 4], &shifted));
            let ca = g.softmax_logsumexp_ce(a, CeTarget::Labels(vec![1])).unwrap();
            let cb = g.softmax_logsumexp_ce(b, CeTarget::Labels(vec![1])).unwrap();
            assert!(
                (g.value(ca).item() - g.value(cb).item()).abs() < 1e-12,
                "shift {c} changed the loss"
            );
        }
    }

    #[test]
    fn cross_entropy_validates_targets() {
        let mut g = Graph::new();
        let logits = g.constant(t(&[2, 3], &[0.0; 6]));
        assert!(matches!(
            g.softmax_logsumexp_ce(logits, CeTarget::Labels(vec![0, 3])),
            Err(DiffError::LabelOutOfRange { label: 3, classes: 3 })
        ));
        let logits2 = g.constant(t(&[2, 3], &[0.0; 6]));
        assert!(matches!(
            g.softmax_logsumexp_ce(logits2, CeTarget::Labels(vec![0])),
            Err(DiffError::TargetCount { targets: 1, rows: 2 })
        ));
        let logits3 = g.constant(t(&[1, 3], &[0.0; 3]));
        let bad = Tensor::new(&[1, 3], vec![0.5, 0.2, 0.2]).unwrap();
        assert!(matches!(
            g.softmax_logsumexp_ce(logits3, CeTarget::Soft(bad)),
            Err(DiffError::InvalidTarget { row: 0 })
        ));
    }

    #[test]
    fn soft_targets_average_over_rows() {
        // Two identical rows must give the same loss as one.
        let q = Tensor::new(&[2, 3], vec![0.25, 0.75, 0.0, 0.25, 0.75, 0.0]).unwrap();
        let mut g = Graph::new();
        let two = g.constant(t(&[2, 3], &[0.1, 0.4, -0.2, 0.1, 0.4, -0.2]));
        let ce2 = g.softmax_logsumexp_ce(two, CeTarget::Soft(q)).unwrap();

        let q1 = Tensor::new(&[1, 3], vec![0.25, 0.75, 0.0]).unwrap();
        let one = g.constant(t(&[1, 3], &[0.1, 0.4, -0.2]));
        let ce1 = g.softmax_logsumexp_ce(one, CeTarget::Soft(q1)).unwrap();
        assert!((g.value(ce2).item() - g.value(ce1).item()).abs() < 1e-15);
    }

    #[test]
    fn unknown_node_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1.0]));
        let mut other = Graph::new();
        let _pad0 = other.constant(t(&[1], &[1.0]));
        let _pad1 = other.constant(t(&[1], &[1.0]));
        let foreign = other.constant(t(&[1], &[2.0]));
        assert!(matches!(
            g.add(x, foreign),
            Err(DiffError::UnknownNode { index: 2 })
        ));
    }
}
