//! Reverse-mode differentiation.
//!
//! Gradient rules are written in terms of graph operations, so with
//! `create_graph` the returned gradients are themselves differentiable and
//! a loss built from them can be differentiated again.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Op, Var};
use crate::tensor::Tensor;

/// Gradients of `loss` with respect to each of `wrt`, in order.
///
/// Only nodes lying on a path from some `wrt` entry to `loss` are visited.
/// With `create_graph` the gradient computations are recorded on the graph;
/// otherwise the results are constants.
pub fn backward<'g, T: Element>(loss: Var<'g, T>, wrt: &[Var<'g, T>], create_graph: bool) -> Result<Vec<Var<'g, T>>> {
    let graph = loss.graph;
    let root = loss.id;
    let loss_shape = loss.shape();
    if loss_shape.iter().product::<usize>() != 1 {
        return Err(TensorError::NonScalarLoss(loss_shape));
    }

    let (ancestor, on_path) = {
        let nodes = graph.nodes.borrow();
        let mut ancestor = vec![false; root + 1];
        ancestor[root] = true;
        for i in (0..=root).rev() {
            if ancestor[i] {
                for &j in &nodes[i].inputs {
                    ancestor[j] = true;
                }
            }
        }
        let mut on_path = vec![false; root + 1];
        for w in wrt {
            assert!(std::ptr::eq(graph, w.graph), "wrt var belongs to another graph");
            if w.id <= root {
                on_path[w.id] = ancestor[w.id];
            }
        }
        for i in 0..=root {
            if ancestor[i] && !on_path[i] {
                on_path[i] = nodes[i].inputs.iter().any(|&j| on_path[j]);
            }
        }
        (ancestor, on_path)
    };
    for (index, w) in wrt.iter().enumerate() {
        if w.id > root || !ancestor[w.id] {
            return Err(TensorError::Unreachable { index, node: w.id });
        }
    }

    let prev = graph.set_recording(create_graph);
    let result = propagate(loss, &on_path);
    graph.set_recording(prev);
    let grads = result?;

    wrt.iter()
        .map(|w| {
            grads[w.id]
                .map(|id| Var { graph, id })
                .ok_or(TensorError::Unreachable { index: 0, node: w.id })
        })
        .collect()
}

fn propagate<'g, T: Element>(loss: Var<'g, T>, on_path: &[bool]) -> Result<Vec<Option<usize>>> {
    let graph = loss.graph;
    let root = loss.id;
    let mut grads: Vec<Option<usize>> = vec![None; root + 1];
    grads[root] = Some(graph.constant(&Tensor::ones(loss.shape())).id);

    for i in (0..=root).rev() {
        let Some(gid) = grads[i] else { continue };
        if !on_path[i] {
            continue;
        }
        let (op, inputs) = {
            let node = &graph.nodes.borrow()[i];
            (node.op.clone(), node.inputs.clone())
        };
        if inputs.is_empty() {
            continue;
        }
        let need: Vec<bool> = inputs.iter().map(|&j| on_path[j]).collect();
        let xs: Vec<Var<'g, T>> = inputs.iter().map(|&id| Var { graph, id }).collect();
        let out = Var { graph, id: i };
        let g = Var { graph, id: gid };
        let contribs = rule(&op, &xs, out, g, &need)?;
        for ((&j, c), needed) in inputs.iter().zip(contribs).zip(need) {
            if !needed {
                continue;
            }
            let Some(c) = c else { continue };
            grads[j] = Some(match grads[j] {
                Some(prev) => Var { graph, id: prev }.add(c)?.id,
                None => c.id,
            });
        }
    }
    Ok(grads)
}

fn mask<'g, T: Element>(x: Var<'g, T>, f: impl Fn(T) -> bool, on: T, off: T) -> Var<'g, T> {
    let m = x.value().map(|v| if f(v) { on } else { off });
    x.graph.constant(&m)
}

fn hw<T: Element>(x: Var<'_, T>) -> (usize, usize) {
    let s = x.shape();
    (s[2], s[3])
}

type Grads<'g, T> = Vec<Option<Var<'g, T>>>;

fn rule<'g, T: Element>(op: &Op<T>, x: &[Var<'g, T>], y: Var<'g, T>, g: Var<'g, T>, need: &[bool]) -> Result<Grads<'g, T>> {
    let one = |v: Var<'g, T>| Ok(vec![Some(v)]);
    let zero = T::zero();
    match *op {
        Op::Leaf => Ok(vec![]),
        Op::Add => Ok(vec![Some(g), Some(g)]),
        Op::Sub => Ok(vec![Some(g), Some(g.neg())]),
        Op::Mul => {
            let ga = if need[0] { Some(g.mul(x[1])?) } else { None };
            let gb = if need[1] { Some(g.mul(x[0])?) } else { None };
            Ok(vec![ga, gb])
        }
        Op::Div => {
            let ga = if need[0] { Some(g.div(x[1])?) } else { None };
            let gb = if need[1] { Some(g.mul(y)?.div(x[1])?.neg()) } else { None };
            Ok(vec![ga, gb])
        }
        Op::Scale(c) => one(g.scale(c)),
        Op::AddScalar(_) => one(g),
        Op::Relu => one(g.mul(mask(x[0], |v| v > zero, T::one(), zero))?),
        Op::LeakyRelu(slope) => one(g.mul(mask(x[0], |v| v > zero, T::one(), slope))?),
        Op::Clamp(lo, hi) => one(g.mul(mask(x[0], |v| v >= lo && v <= hi, T::one(), zero))?),
        Op::Sigmoid => {
            let d = y.mul(y.neg().add_scalar(T::one()))?;
            one(g.mul(d)?)
        }
        Op::Square => one(g.mul(x[0].scale(T::lit(2.0)))?),
        Op::Sqrt => one(g.mul(y.recip())?.scale(T::lit(0.5))),
        Op::Log => one(g.mul(x[0].recip())?),
        Op::Recip => one(g.mul(y.square())?.neg()),
        Op::MatMul => {
            let ga = if need[0] { Some(g.matmul(x[1].t()?)?) } else { None };
            let gb = if need[1] { Some(x[0].t()?.matmul(g)?) } else { None };
            Ok(vec![ga, gb])
        }
        Op::Transpose => one(g.t()?),
        Op::Reshape => one(g.reshape(x[0].shape())?),
        Op::Concat(axis) => {
            let mut start = 0;
            let mut out = Vec::with_capacity(x.len());
            for (xi, &needed) in x.iter().zip(need) {
                let len = xi.shape()[axis];
                out.push(if needed { Some(g.slice(axis, start, len)?) } else { None });
                start += len;
            }
            Ok(out)
        }
        Op::Slice { axis, start } => one(g.embed(axis, start, x[0].shape()[axis])?),
        Op::Embed { axis, start } => one(g.slice(axis, start, x[0].shape()[axis])?),
        Op::Expand => one(g.sum_to(&x[0].shape())?),
        Op::SumTo => one(g.expand(&x[0].shape())?),
        Op::Sum => {
            let shape = x[0].shape();
            one(g.reshape(vec![1; shape.len()])?.expand(&shape)?)
        }
        Op::Conv2d { stride, pad } => {
            let k = x[1].shape()[2];
            let gx = if need[0] { Some(g.conv_transpose2d_to(x[1], stride, pad, hw(x[0]))?) } else { None };
            let gw = if need[1] { Some(x[0].conv2d_weight_grad(g, stride, pad, k)?) } else { None };
            Ok(vec![gx, gw])
        }
        Op::ConvTranspose2d { stride, pad } => {
            let k = x[1].shape()[2];
            let gx = if need[0] { Some(g.conv2d(x[1], stride, pad)?) } else { None };
            let gw = if need[1] { Some(g.conv2d_weight_grad(x[0], stride, pad, k)?) } else { None };
            Ok(vec![gx, gw])
        }
        Op::Conv2dWeightGrad { stride, pad } => {
            // inputs: big map, small map; output has the kernel's shape
            let gbig = if need[0] { Some(x[1].conv_transpose2d_to(g, stride, pad, hw(x[0]))?) } else { None };
            let gsmall = if need[1] { Some(x[0].conv2d(g, stride, pad)?) } else { None };
            Ok(vec![gbig, gsmall])
        }
    }
}
