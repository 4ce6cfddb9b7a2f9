//! Reverse-mode differentiation over a fixed set of dense operations.
//!
//! A [`Graph`] is built once through [`GraphBuilder`] and is immutable
//! afterwards. Evaluation happens in an [`Executor`], which records every
//! intermediate value on [`Executor::forward`] so that
//! [`Executor::backward`] can replay the tape in reverse.

pub mod kernels;
mod oracle;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{GradientSet, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use oracle::{compare_gradients, finite_diff_gradient, op_probe, GradientMismatch};

/// Named input bindings for a forward pass.
pub type Inputs<T = f64> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    MatMul,
    Add,
    BiasAdd,
    Tanh,
    Relu,
    ConcatCols,
    Scale,
    L2NormalizeRows,
    PairwiseDot,
    SoftmaxXentDiag,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 10] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::BiasAdd,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::ConcatCols,
        OpKind::Scale,
        OpKind::L2NormalizeRows,
        OpKind::PairwiseDot,
        OpKind::SoftmaxXentDiag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::BiasAdd => "bias_add",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::ConcatCols => "concat",
            OpKind::Scale => "scale",
            OpKind::L2NormalizeRows => "l2_normalize_rows",
            OpKind::PairwiseDot => "pairwise_dot",
            OpKind::SoftmaxXentDiag => "softmax_xent_diag",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        [OpKind::Input, OpKind::Param]
            .into_iter()
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    BiasAdd(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    ConcatCols(NodeId, NodeId),
    Scale(NodeId, f64),
    L2NormalizeRows(NodeId),
    PairwiseDot(NodeId, NodeId),
    SoftmaxXentDiag(NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input(_) => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::BiasAdd(..) => OpKind::BiasAdd,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Scale(..) => OpKind::Scale,
            Op::L2NormalizeRows(_) => OpKind::L2NormalizeRows,
            Op::PairwiseDot(..) => OpKind::PairwiseDot,
            Op::SoftmaxXentDiag(_) => OpKind::SoftmaxXentDiag,
        }
    }
}

/// Incrementally constructs a topologically ordered [`Graph`].
///
/// Every node may only reference nodes created before it, so the node list
/// is topologically ordered by construction.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Op>,
    sign_fault: Option<OpKind>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Param(name.into()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::BiasAdd(x, bias))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    /// Joins two matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatCols(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(x, factor))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        self.push(Op::L2NormalizeRows(x))
    }

    /// `a * b^T`: dot products between every row of `a` and every row of `b`.
    pub fn pairwise_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::PairwiseDot(a, b))
    }

    /// Scalar mean cross-entropy of each row's softmax against its diagonal entry.
    pub fn softmax_xent_diag(&mut self, logits: NodeId) -> NodeId {
        self.push(Op::SoftmaxXentDiag(logits))
    }

    /// Flips the sign of one operation's backward rule. Only meant for
    /// mutation fixtures that check the gradient oracle catches the fault.
    #[doc(hidden)]
    pub fn inject_sign_fault(&mut self, kind: OpKind) -> &mut Self {
        self.sign_fault = Some(kind);
        self
    }

    pub fn build(self) -> Graph {
        Graph {
            nodes: self.nodes,
            sign_fault: self.sign_fault,
        }
    }
}

/// Immutable computation graph. Safe to share across threads.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Op>,
    sign_fault: Option<OpKind>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output(&self) -> NodeId {
        NodeId(self.nodes.len() - 1)
    }

    pub fn kind(&self, node: NodeId) -> OpKind {
        self.nodes[node.0].kind()
    }

    pub fn executor<T: Scalar>(&self) -> Executor<'_, T> {
        Executor {
            graph: self,
            tape: None,
        }
    }

    /// Forward pass returning only the output value.
    pub fn eval<T: Scalar>(&self, inputs: &Inputs<T>, params: &ParameterSet<T>) -> Result<Tensor<T>> {
        let mut ex = self.executor();
        ex.forward(inputs, params)?;
        Ok(ex.take_output())
    }
}

struct Tape<T> {
    values: Vec<Tensor<T>>,
    // per-node auxiliary buffers (row norms, softmax probabilities)
    aux: Vec<Option<Vec<T>>>,
}

/// One evaluation context over a [`Graph`].
pub struct Executor<'g, T: Scalar> {
    graph: &'g Graph,
    tape: Option<Tape<T>>,
}

impl<'g, T: Scalar> Executor<'g, T> {
    /// Evaluates every node and records intermediates. Returns the output node value.
    pub fn forward(&mut self, inputs: &Inputs<T>, params: &ParameterSet<T>) -> Result<&Tensor<T>> {
        let n = self.graph.nodes.len();
        if n == 0 {
            return Err(Error::State("graph has no nodes".into()));
        }
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(n);
        let mut aux = Vec::with_capacity(n);
        for (id, op) in self.graph.nodes.iter().enumerate() {
            let (value, extra) = forward_node(id, op, &values, inputs, params)?;
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    node: id,
                    op: op.kind().name(),
                });
            }
            values.push(value);
            aux.push(extra);
        }
        self.tape = Some(Tape { values, aux });
        Ok(self.output().expect("tape just recorded"))
    }

    pub fn output(&self) -> Option<&Tensor<T>> {
        self.tape.as_ref().and_then(|t| t.values.last())
    }

    pub fn value(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.tape.as_ref().and_then(|t| t.values.get(node.0))
    }

    fn take_output(&mut self) -> Tensor<T> {
        self.tape
            .take()
            .and_then(|mut t| t.values.pop())
            .expect("forward succeeded")
    }

    /// Reverse-mode gradients of the scalar `loss` node with respect to every
    /// trainable layer of `params`. Layers the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId, params: &ParameterSet<T>) -> Result<GradientSet<T>> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let loss_value = tape
            .values
            .get(loss.0)
            .ok_or_else(|| Error::State(format!("node {} is not in the graph", loss.0)))?;
        if !loss_value.is_scalar() {
            return Err(Error::State(format!(
                "loss node {} has shape {:?}, expected a scalar",
                loss.0,
                loss_value.shape()
            )));
        }

        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        let mut grads = GradientSet::zeros_like(params);

        for id in (0..=loss.0).rev() {
            let Some(dy) = adj[id].take() else { continue };
            let op = &self.graph.nodes[id];
            let sign = if self.graph.sign_fault == Some(op.kind()) {
                -T::one()
            } else {
                T::one()
            };
            let y = &tape.values[id];
            match op {
                Op::Input(_) => {}
                Op::Param(name) => {
                    if let Some(g) = grads.get_mut(name) {
                        accumulate(g.data_mut(), &dy);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&tape.values[a.0], &tape.values[b.0]);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // dA = dY B^T, dB = A^T dY
                    let da = kernels::matmul_bt(&dy, bv.data(), m, n, k);
                    let db = kernels::matmul_at(av.data(), &dy, m, k, n);
                    send(&mut adj, *a, signed(da, sign));
                    send(&mut adj, *b, signed(db, sign));
                }
                Op::Add(a, b) => {
                    send(&mut adj, *a, signed(dy.clone(), sign));
                    send(&mut adj, *b, signed(dy, sign));
                }
                Op::BiasAdd(x, b) => {
                    let cols = y.cols();
                    let mut db = vec![T::zero(); cols];
                    for row in dy.chunks(cols) {
                        accumulate(&mut db, row);
                    }
                    send(&mut adj, *x, signed(dy, sign));
                    send(&mut adj, *b, signed(db, sign));
                }
                Op::Tanh(x) => {
                    let dx = dy
                        .iter()
                        .zip(y.data())
                        .map(|(&d, &t)| d * (T::one() - t * t))
                        .collect();
                    send(&mut adj, *x, signed(dx, sign));
                }
                Op::Relu(x) => {
                    let xv = &tape.values[x.0];
                    let dx = dy
                        .iter()
                        .zip(xv.data())
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    send(&mut adj, *x, signed(dx, sign));
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (tape.values[a.0].cols(), tape.values[b.0].cols());
                    let mut da = Vec::with_capacity(y.rows() * ca);
                    let mut db = Vec::with_capacity(y.rows() * cb);
                    for row in dy.chunks(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    send(&mut adj, *a, signed(da, sign));
                    send(&mut adj, *b, signed(db, sign));
                }
                Op::Scale(x, f) => {
                    let f = T::of(*f);
                    send(&mut adj, *x, signed(dy.iter().map(|&d| d * f).collect(), sign));
                }
                Op::L2NormalizeRows(x) => {
                    let norms = tape.aux[id].as_ref().expect("norms recorded");
                    let dx = kernels::l2_normalize_rows_backward(y.data(), norms, &dy, y.cols());
                    send(&mut adj, *x, signed(dx, sign));
                }
                Op::PairwiseDot(a, b) => {
                    let (av, bv) = (&tape.values[a.0], &tape.values[b.0]);
                    let (m, d, n) = (av.rows(), av.cols(), bv.rows());
                    // Y = A B^T: dA = dY B, dB = dY^T A
                    let da = kernels::matmul(&dy, bv.data(), m, n, d);
                    let db = kernels::matmul_at(&dy, av.data(), m, n, d);
                    send(&mut adj, *a, signed(da, sign));
                    send(&mut adj, *b, signed(db, sign));
                }
                Op::SoftmaxXentDiag(x) => {
                    let probs = tape.aux[id].as_ref().expect("probabilities recorded");
                    let xv = &tape.values[x.0];
                    let dx = kernels::softmax_xent_diag_backward(probs, xv.rows(), xv.cols(), dy[0]);
                    send(&mut adj, *x, signed(dx, sign));
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn signed<T: Scalar>(mut v: Vec<T>, sign: T) -> Vec<T> {
    if sign != T::one() {
        v.iter_mut().for_each(|x| *x = *x * sign);
    }
    v
}

fn send<T: Scalar>(adj: &mut [Option<Vec<T>>], to: NodeId, grad: Vec<T>) {
    match &mut adj[to.0] {
        Some(existing) => accumulate(existing, &grad),
        slot @ None => *slot = Some(grad),
    }
}

fn shape_err(id: usize, op: &Op, detail: String) -> Error {
    Error::shape(format!("node {id} ({})", op.kind().name()), detail)
}

fn require_matrix<T: Scalar>(id: usize, op: &Op, t: &Tensor<T>) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(shape_err(id, op, format!("expected a matrix, got shape {:?}", t.shape())))
    }
}

fn forward_node<T: Scalar>(
    id: usize,
    op: &Op,
    values: &[Tensor<T>],
    inputs: &Inputs<T>,
    params: &ParameterSet<T>,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    let v = |n: &NodeId| &values[n.0];
    let out = match op {
        Op::Input(name) => inputs
            .get(name)
            .cloned()
            .ok_or_else(|| shape_err(id, op, format!("input `{name}` is not bound")))?,
        Op::Param(name) => params
            .get(name)
            .cloned()
            .ok_or_else(|| shape_err(id, op, format!("parameter `{name}` is missing")))?,
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            require_matrix(id, op, a)?;
            require_matrix(id, op, b)?;
            if a.cols() != b.rows() {
                return Err(shape_err(
                    id,
                    op,
                    format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            Tensor::from_raw(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
        }
        Op::Add(a, b) => {
            let (a, b) = (v(a), v(b));
            if !a.same_shape(b) {
                return Err(shape_err(
                    id,
                    op,
                    format!("cannot add {:?} and {:?}", a.shape(), b.shape()),
                ));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            Tensor::from_raw(a.shape().to_vec(), data)
        }
        Op::BiasAdd(x, b) => {
            let (x, b) = (v(x), v(b));
            require_matrix(id, op, x)?;
            if b.shape() != [x.cols()] {
                return Err(shape_err(
                    id,
                    op,
                    format!("bias {:?} does not match {} columns", b.shape(), x.cols()),
                ));
            }
            let cols = x.cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(cols) {
                accumulate(row, b.data());
            }
            Tensor::from_raw(x.shape().to_vec(), data)
        }
        Op::Tanh(x) => v(x).map(T::tanh),
        Op::Relu(x) => v(x).map(|e| e.max(T::zero())),
        Op::ConcatCols(a, b) => {
            let (a, b) = (v(a), v(b));
            require_matrix(id, op, a)?;
            require_matrix(id, op, b)?;
            if a.rows() != b.rows() {
                return Err(shape_err(
                    id,
                    op,
                    format!("row counts differ: {} vs {}", a.rows(), b.rows()),
                ));
            }
            let mut data = Vec::with_capacity(a.len() + b.len());
            for r in 0..a.rows() {
                data.extend_from_slice(a.row(r));
                data.extend_from_slice(b.row(r));
            }
            Tensor::from_raw(vec![a.rows(), a.cols() + b.cols()], data)
        }
        Op::Scale(x, f) => {
            let f = T::of(*f);
            v(x).map(|e| e * f)
        }
        Op::L2NormalizeRows(x) => {
            let x = v(x);
            require_matrix(id, op, x)?;
            let (y, norms) = kernels::l2_normalize_rows(x.data(), x.rows(), x.cols());
            return Ok((Tensor::from_raw(x.shape().to_vec(), y), Some(norms)));
        }
        Op::PairwiseDot(a, b) => {
            let (a, b) = (v(a), v(b));
            require_matrix(id, op, a)?;
            require_matrix(id, op, b)?;
            if a.cols() != b.cols() {
                return Err(shape_err(
                    id,
                    op,
                    format!("row widths differ: {:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, d, n) = (a.rows(), a.cols(), b.rows());
            Tensor::from_raw(vec![m, n], kernels::matmul_bt(a.data(), b.data(), m, d, n))
        }
        Op::SoftmaxXentDiag(x) => {
            let x = v(x);
            require_matrix(id, op, x)?;
            if x.rows() > x.cols() {
                return Err(shape_err(
                    id,
                    op,
                    format!("need at least as many columns as rows, got {:?}", x.shape()),
                ));
            }
            let (loss, probs) = kernels::softmax_xent_diag(x.data(), x.rows(), x.cols());
            return Ok((Tensor::scalar(loss), Some(probs)));
        }
    };
    Ok((out, None))
}
