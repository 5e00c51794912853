//! Computation graph and differentiable variables.
//!
//! Every operation evaluates eagerly and, when any input requires a
//! gradient, appends a node to the graph. Node ids are creation order, so
//! the node list is always topologically sorted.

use std::cell::{Cell, RefCell};
use std::fmt;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(T),
    AddScalar(T),
    Relu,
    LeakyRelu(T),
    Sigmoid,
    Square,
    Sqrt,
    Log,
    Recip,
    Clamp(T, T),
    MatMul,
    Transpose,
    Reshape,
    Concat(usize),
    Slice { axis: usize, start: usize },
    Embed { axis: usize, start: usize },
    Expand,
    SumTo,
    Sum,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize },
    Conv2dWeightGrad { stride: usize, pad: usize },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Log => "log",
            Op::Recip => "recip",
            Op::Clamp(..) => "clamp",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
            Op::Expand => "expand",
            Op::SumTo => "sum_to",
            Op::Sum => "sum",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
        }
    }
}

pub(crate) struct Node<T: Element> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub inputs: Vec<usize>,
    pub requires_grad: bool,
}

/// Owner of all nodes created during one forward/backward pass.
pub struct Graph<T: Element = f32> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: Cell::new(true) }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient can be requested from `backward`.
    pub fn param(&self, value: &Tensor<T>) -> Var<'_, T> {
        self.leaf(value.clone(), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: &Tensor<T>) -> Var<'_, T> {
        self.leaf(value.clone(), false)
    }

    pub fn input(&self, value: &Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf(value.clone(), requires_grad)
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, inputs: Vec::new(), requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Run `f` with recording disabled: everything it creates is a constant.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.recording.replace(false);
        let out = f();
        self.recording.set(prev);
        out
    }

    pub(crate) fn set_recording(&self, on: bool) -> bool {
        self.recording.replace(on)
    }

    pub(crate) fn value(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, inputs: Vec<usize>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.recording.get() && inputs.iter().any(|&i| nodes[i].requires_grad);
        let (op, inputs) = if requires_grad { (op, inputs) } else { (Op::Leaf, Vec::new()) };
        nodes.push(Node { value, op, inputs, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Element = f32> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

fn guard<T: Element>(g: &Graph<T>, a: Var<'_, T>, b: Var<'_, T>) {
    assert!(std::ptr::eq(g, b.graph), "vars {} and {} belong to different graphs", a.id, b.id);
}

macro_rules! unary {
    ($(#[$m:meta])* $name:ident, $op:expr, |$v:ident| $body:expr) => {
        $(#[$m])*
        pub fn $name(self) -> Var<'g, T> {
            let value = self.value().map(|$v| $body);
            self.graph.push(value, $op, vec![self.id])
        }
    };
}

impl<'g, T: Element> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut off from the graph.
    pub fn detach(self) -> Var<'g, T> {
        self.graph.constant(&self.value())
    }

    fn binary(self, other: Var<'g, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'g, T>> {
        guard(self.graph, self, other);
        let value = kernels::zip(op.name(), &self.value(), &other.value(), f)?;
        Ok(self.graph.push(value, op, vec![self.id, other.id]))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn scale(self, factor: T) -> Var<'g, T> {
        let value = self.value().map(|v| v * factor);
        self.graph.push(value, Op::Scale(factor), vec![self.id])
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        let value = self.value().map(|v| v + c);
        self.graph.push(value, Op::AddScalar(c), vec![self.id])
    }

    unary!(
        /// `max(0, x)`; the derivative at 0 is taken as 0.
        relu, Op::Relu, |v| if v > T::zero() { v } else { T::zero() }
    );
    unary!(sigmoid, Op::Sigmoid, |v| T::one() / (T::one() + (-v).exp()));
    unary!(square, Op::Square, |v| v * v);
    unary!(sqrt, Op::Sqrt, |v| v.sqrt());
    unary!(log, Op::Log, |v| v.ln());
    unary!(
        /// `1 / x`, with `1 / 0` defined as 0.
        recip, Op::Recip, |v| if v == T::zero() { T::zero() } else { T::one() / v }
    );

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        let value = self.value().map(|v| if v > T::zero() { v } else { v * slope });
        self.graph.push(value, Op::LeakyRelu(slope), vec![self.id])
    }

    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        let value = self.value().map(|v| v.max(lo).min(hi));
        self.graph.push(value, Op::Clamp(lo, hi), vec![self.id])
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        guard(self.graph, self, other);
        let value = kernels::matmul(&self.value(), &other.value())?;
        Ok(self.graph.push(value, Op::MatMul, vec![self.id, other.id]))
    }

    /// Swap the two axes of a matrix.
    pub fn t(self) -> Result<Var<'g, T>> {
        let value = kernels::transpose(&self.value())?;
        Ok(self.graph.push(value, Op::Transpose, vec![self.id]))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>> {
        let value = self.value().reshape(shape)?;
        Ok(self.graph.push(value, Op::Reshape, vec![self.id]))
    }

    /// Collapse everything after the leading axis.
    pub fn flatten(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let rest: usize = shape[1..].iter().product();
        self.reshape(vec![shape[0], rest])
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let value = kernels::slice(&self.value(), axis, start, len)?;
        Ok(self.graph.push(value, Op::Slice { axis, start }, vec![self.id]))
    }

    /// Zero-pad along `axis` so that `self` occupies `[start, start + len)` of `total`.
    pub fn embed(self, axis: usize, start: usize, total: usize) -> Result<Var<'g, T>> {
        let value = kernels::embed(&self.value(), axis, start, total)?;
        Ok(self.graph.push(value, Op::Embed { axis, start }, vec![self.id]))
    }

    /// Repeat along axes of extent one.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let value = kernels::expand(&self.value(), shape)?;
        Ok(self.graph.push(value, Op::Expand, vec![self.id]))
    }

    /// Sum down to a broadcast-compatible shape (adjoint of `expand`).
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let value = kernels::sum_to(&self.value(), shape)?;
        Ok(self.graph.push(value, Op::SumTo, vec![self.id]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g, T> {
        let value = Tensor::scalar(self.value().sum());
        self.graph.push(value, Op::Sum, vec![self.id])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// Euclidean norm of all elements, shape `[1]`.
    pub fn l2_norm(self) -> Var<'g, T> {
        self.square().sum().sqrt()
    }

    /// Per-row Euclidean norm of a `[N, M]` matrix, shape `[N, 1]`.
    pub fn row_l2_norm(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "row_l2_norm",
                detail: format!("expected rank 2, got {shape:?}"),
            });
        }
        Ok(self.square().sum_to(&[shape[0], 1])?.sqrt())
    }

    pub fn conv2d(self, weight: Var<'g, T>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        guard(self.graph, self, weight);
        let value = kernels::conv2d(&self.value(), &weight.value(), stride, pad)?;
        Ok(self.graph.push(value, Op::Conv2d { stride, pad }, vec![self.id, weight.id]))
    }

    /// Transposed convolution with the standard output extent `(n - 1)s - 2p + k`.
    pub fn conv_transpose2d(self, weight: Var<'g, T>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let (x, w) = (self.shape(), weight.shape());
        let bad = || TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("input {x:?} with kernel {w:?}, stride {stride}, pad {pad}"),
        };
        if x.len() != 4 || w.len() != 4 {
            return Err(bad());
        }
        let oh = kernels::conv_transpose_out_len(x[2], w[2], stride, pad).ok_or_else(bad)?;
        let ow = kernels::conv_transpose_out_len(x[3], w[3], stride, pad).ok_or_else(bad)?;
        self.conv_transpose2d_to(weight, stride, pad, (oh, ow))
    }

    /// Transposed convolution onto an explicit output extent.
    pub fn conv_transpose2d_to(
        self,
        weight: Var<'g, T>,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Result<Var<'g, T>> {
        guard(self.graph, self, weight);
        let value = kernels::conv_transpose2d(&self.value(), &weight.value(), stride, pad, out_hw)?;
        Ok(self.graph.push(value, Op::ConvTranspose2d { stride, pad }, vec![self.id, weight.id]))
    }

    /// Kernel gradient of a convolution whose input is `self` and whose
    /// output gradient is `small`.
    pub fn conv2d_weight_grad(self, small: Var<'g, T>, stride: usize, pad: usize, k: usize) -> Result<Var<'g, T>> {
        guard(self.graph, self, small);
        let value = kernels::conv2d_weight_grad(&self.value(), &small.value(), stride, pad, k)?;
        Ok(self.graph.push(value, Op::Conv2dWeightGrad { stride, pad }, vec![self.id, small.id]))
    }
}

/// Dispatchable operation kinds with their attributes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind<T = f32> {
    MatMul,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize },
    Add,
    Sub,
    Mul,
    Div,
    Concat { axis: usize },
    LeakyRelu { slope: T },
    Relu,
    Sigmoid,
    Mean,
    Sum,
    Square,
    Sqrt,
    Log,
    L2Norm,
    Scale { factor: T },
}

impl<T> OpKind<T> {
    pub fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Concat { .. } => None,
            OpKind::MatMul
            | OpKind::Conv2d { .. }
            | OpKind::ConvTranspose2d { .. }
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div => Some(2),
            _ => Some(1),
        }
    }
}

impl<T: Element> Graph<T> {
    /// Apply `kind` to `inputs`.
    pub fn forward_op<'g>(&'g self, kind: OpKind<T>, inputs: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "forward_op",
                    detail: format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
                });
            }
        }
        let a = || inputs[0];
        let b = || inputs[1];
        match kind {
            OpKind::MatMul => a().matmul(b()),
            OpKind::Conv2d { stride, pad } => a().conv2d(b(), stride, pad),
            OpKind::ConvTranspose2d { stride, pad } => a().conv_transpose2d(b(), stride, pad),
            OpKind::Add => a().add(b()),
            OpKind::Sub => a().sub(b()),
            OpKind::Mul => a().mul(b()),
            OpKind::Div => a().div(b()),
            OpKind::Concat { axis } => concat(inputs, axis),
            OpKind::LeakyRelu { slope } => Ok(a().leaky_relu(slope)),
            OpKind::Relu => Ok(a().relu()),
            OpKind::Sigmoid => Ok(a().sigmoid()),
            OpKind::Mean => Ok(a().mean()),
            OpKind::Sum => Ok(a().sum()),
            OpKind::Square => Ok(a().square()),
            OpKind::Sqrt => Ok(a().sqrt()),
            OpKind::Log => Ok(a().log()),
            OpKind::L2Norm => Ok(a().l2_norm()),
            OpKind::Scale { factor } => Ok(a().scale(factor)),
        }
    }
}

/// Concatenate along `axis`.
pub fn concat<'g, T: Element>(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let first = parts.first().ok_or_else(|| TensorError::ShapeMismatch {
        op: "concat",
        detail: "no inputs".into(),
    })?;
    let graph = first.graph;
    for p in parts {
        guard(graph, *first, *p);
    }
    let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor<T>> = values.iter().collect();
    let value = kernels::concat(&refs, axis)?;
    Ok(graph.push(value, Op::Concat(axis), parts.iter().map(|p| p.id).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values() {
        let g = Graph::<f32>::new();
        let x = g.constant(&Tensor::new([2], vec![-1.0, 2.0]).unwrap());
        let y = g.forward_op(OpKind::LeakyRelu { slope: 0.2 }, &[x]).unwrap();
        assert_eq!(y.value().data(), &[-0.2, 2.0]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let g = Graph::<f32>::new();
        let c = g.constant(&Tensor::ones([3]));
        let p = g.param(&Tensor::ones([3]));
        assert!(!c.square().requires_grad());
        assert!(c.add(p).unwrap().requires_grad());
        assert!(!g.no_grad(|| p.square()).requires_grad());
        assert!(!p.detach().requires_grad());
    }

    #[test]
    fn forward_op_checks_arity() {
        let g = Graph::<f32>::new();
        let x = g.constant(&Tensor::ones([3]));
        assert!(g.forward_op(OpKind::Add, &[x]).is_err());
        let s = g.forward_op(OpKind::Concat { axis: 0 }, &[x, x, x]).unwrap();
        assert_eq!(s.shape(), vec![9]);
    }
}
