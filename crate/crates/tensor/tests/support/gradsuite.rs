//! Finite-difference gradient checking shared by the gradcheck tests and
//! the acceptance harness.
//!
//! The f32 engine is checked against central differences evaluated with the
//! f64 instantiation of the same forward ops; the f64 engine against its own
//! central differences.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textpose_tensor::{
    backward, conv_out_len, conv_transpose_out_len, Element, Graph, OpKind, Result, Tensor, Var,
};

pub const CASES: usize = 20;
pub const STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub enum Probe {
    Kind(OpKind<f64>),
    Transpose,
    Slice { axis: usize, start: usize, len: usize },
    Embed { axis: usize, start: usize, total: usize },
    Expand,
    SumTo,
    Clamp,
    Recip,
    AddScalar,
    WeightGrad { stride: usize, pad: usize, k: usize },
    RowNorm,
}

pub fn kind<T: Element>(k: OpKind<f64>) -> OpKind<T> {
    match k {
        OpKind::LeakyRelu { slope } => OpKind::LeakyRelu { slope: T::lit(slope) },
        OpKind::Scale { factor } => OpKind::Scale { factor: T::lit(factor) },
        OpKind::MatMul => OpKind::MatMul,
        OpKind::Conv2d { stride, pad } => OpKind::Conv2d { stride, pad },
        OpKind::ConvTranspose2d { stride, pad } => OpKind::ConvTranspose2d { stride, pad },
        OpKind::Add => OpKind::Add,
        OpKind::Sub => OpKind::Sub,
        OpKind::Mul => OpKind::Mul,
        OpKind::Div => OpKind::Div,
        OpKind::Concat { axis } => OpKind::Concat { axis },
        OpKind::Relu => OpKind::Relu,
        OpKind::Sigmoid => OpKind::Sigmoid,
        OpKind::Mean => OpKind::Mean,
        OpKind::Sum => OpKind::Sum,
        OpKind::Square => OpKind::Square,
        OpKind::Sqrt => OpKind::Sqrt,
        OpKind::Log => OpKind::Log,
        OpKind::L2Norm => OpKind::L2Norm,
    }
}

pub fn apply<'g, T: Element>(probe: Probe, g: &'g Graph<T>, xs: &[Var<'g, T>], out_shape: &[usize]) -> Result<Var<'g, T>> {
    match probe {
        Probe::Kind(k) => g.forward_op(kind(k), xs),
        Probe::Transpose => xs[0].t(),
        Probe::Slice { axis, start, len } => xs[0].slice(axis, start, len),
        Probe::Embed { axis, start, total } => xs[0].embed(axis, start, total),
        Probe::Expand => xs[0].expand(out_shape),
        Probe::SumTo => xs[0].sum_to(out_shape),
        Probe::Clamp => Ok(xs[0].clamp(T::lit(-0.5), T::lit(0.5))),
        Probe::Recip => Ok(xs[0].recip()),
        Probe::AddScalar => Ok(xs[0].add_scalar(T::lit(0.25))),
        Probe::WeightGrad { stride, pad, k } => xs[0].conv2d_weight_grad(xs[1], stride, pad, k),
        Probe::RowNorm => xs[0].row_l2_norm(),
    }
}

pub struct Case {
    probe: Probe,
    inputs: Vec<Tensor<f64>>,
    out_shape: Vec<usize>,
}

/// Scalar objective `sum(op(inputs) * r)` and its input gradients.
pub fn evaluate<T: Element>(case: &Case, inputs: &[Tensor<f64>], r: &Tensor<f64>, grads: bool) -> (f64, Vec<Tensor<f64>>) {
    let g = Graph::<T>::new();
    let xs: Vec<Var<'_, T>> = inputs.iter().map(|t| g.param(&t.cast())).collect();
    let y = apply(case.probe, &g, &xs, &case.out_shape).expect("forward");
    let loss = y.mul(g.constant(&r.cast())).expect("weights").sum();
    let value = loss.value().item().as_f64();
    if !grads {
        return (value, vec![]);
    }
    let gs = backward(loss, &xs, false).expect("backward");
    (value, gs.iter().map(|v| v.value().cast()).collect())
}

/// Central difference at `STEP`, Richardson-extrapolated with `STEP / 2`
/// so the truncation error is O(h^4) rather than O(h^2).
pub fn central_difference(f: impl Fn(f64) -> f64) -> f64 {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    (4.0 * d(STEP / 2.0) - d(STEP)) / 3.0
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Worst relative error between `T`-precision analytic gradients and f64
/// central differences over one case.
pub fn check_case<T: Element>(case: &Case, rng: &mut ChaCha8Rng) -> f64 {
    let probe_out = {
        let g = Graph::<f64>::new();
        let xs: Vec<Var<'_, f64>> = case.inputs.iter().map(|t| g.constant(t)).collect();
        apply(case.probe, &g, &xs, &case.out_shape).expect("forward").shape()
    };
    let n: usize = probe_out.iter().product();
    let r = Tensor::new(probe_out, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (_, analytic) = evaluate::<T>(case, &case.inputs, &r, true);
    let mut worst: f64 = 0.0;
    for (i, input) in case.inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let numeric = central_difference(|delta| {
                let mut x = case.inputs.clone();
                x[i].data_mut()[j] += delta;
                evaluate::<f64>(case, &x, &r, false).0
            });
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

pub enum Dist {
    Signed,
    Positive,
    AwayFromZero,
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], dist: Dist) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match dist {
            Dist::Signed => rng.random_range(-1.0..1.0),
            Dist::Positive => rng.random_range(0.5..2.0),
            Dist::AwayFromZero => {
                let m = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rand_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.random_range(1..=3);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// Random convolution geometry: (batch, c_in, c_out, h, w, k, stride, pad).
pub fn rand_conv(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize, usize, usize) {
    loop {
        let k = rng.random_range(1..=4);
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1).min(k - 1);
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        if conv_out_len(h, k, stride, pad).is_some() && conv_out_len(w, k, stride, pad).is_some() {
            return (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3), h, w, k, stride, pad);
        }
    }
}

pub fn make_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    use Dist::*;
    let unary = |rng: &mut ChaCha8Rng, probe: Probe, dist: Dist| {
        let s = rand_shape(rng);
        Case { probe, inputs: vec![rand_tensor(rng, &s, dist)], out_shape: vec![] }
    };
    let binary = |rng: &mut ChaCha8Rng, op: OpKind<f64>, second: Dist| {
        let s = rand_shape(rng);
        let a = rand_tensor(rng, &s, Signed);
        let b = rand_tensor(rng, &s, second);
        Case { probe: Probe::Kind(op), inputs: vec![a, b], out_shape: vec![] }
    };
    match name {
        "matmul" => {
            let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
            Case {
                probe: Probe::Kind(OpKind::MatMul),
                inputs: vec![rand_tensor(rng, &[m, k], Signed), rand_tensor(rng, &[k, n], Signed)],
                out_shape: vec![],
            }
        }
        "conv2d" => {
            let (n, ci, co, h, w, k, stride, pad) = rand_conv(rng);
            Case {
                probe: Probe::Kind(OpKind::Conv2d { stride, pad }),
                inputs: vec![rand_tensor(rng, &[n, ci, h, w], Signed), rand_tensor(rng, &[co, ci, k, k], Signed)],
                out_shape: vec![],
            }
        }
        "conv_transpose2d" => loop {
            let (n, ci, co, h, w, k, stride, pad) = rand_conv(rng);
            let ok = conv_transpose_out_len(h, k, stride, pad)
                .zip(conv_transpose_out_len(w, k, stride, pad))
                .is_some_and(|(oh, ow)| {
                    conv_out_len(oh, k, stride, pad) == Some(h) && conv_out_len(ow, k, stride, pad) == Some(w)
                });
            if ok {
                break Case {
                    probe: Probe::Kind(OpKind::ConvTranspose2d { stride, pad }),
                    inputs: vec![rand_tensor(rng, &[n, ci, h, w], Signed), rand_tensor(rng, &[ci, co, k, k], Signed)],
                    out_shape: vec![],
                };
            }
        },
        "conv2d_weight_grad" => {
            let (n, ci, co, h, w, k, stride, pad) = rand_conv(rng);
            let (oh, ow) = (conv_out_len(h, k, stride, pad).unwrap(), conv_out_len(w, k, stride, pad).unwrap());
            Case {
                probe: Probe::WeightGrad { stride, pad, k },
                inputs: vec![rand_tensor(rng, &[n, ci, h, w], Signed), rand_tensor(rng, &[n, co, oh, ow], Signed)],
                out_shape: vec![],
            }
        }
        "add" => binary(rng, OpKind::Add, Signed),
        "sub" => binary(rng, OpKind::Sub, Signed),
        "mul" => binary(rng, OpKind::Mul, Signed),
        "div" => binary(rng, OpKind::Div, Positive),
        "concat" => {
            let mut s = rand_shape(rng);
            let axis = rng.random_range(0..s.len());
            let count = rng.random_range(2..=3);
            let inputs = (0..count)
                .map(|_| {
                    s[axis] = rng.random_range(1..=3);
                    rand_tensor(rng, &s, Signed)
                })
                .collect();
            Case { probe: Probe::Kind(OpKind::Concat { axis }), inputs, out_shape: vec![] }
        }
        "leaky_relu" => unary(rng, Probe::Kind(OpKind::LeakyRelu { slope: 0.2 }), AwayFromZero),
        "relu" => unary(rng, Probe::Kind(OpKind::Relu), AwayFromZero),
        "sigmoid" => unary(rng, Probe::Kind(OpKind::Sigmoid), Signed),
        "mean" => unary(rng, Probe::Kind(OpKind::Mean), Signed),
        "sum" => unary(rng, Probe::Kind(OpKind::Sum), Signed),
        "square" => unary(rng, Probe::Kind(OpKind::Square), Signed),
        "sqrt" => unary(rng, Probe::Kind(OpKind::Sqrt), Positive),
        "log" => unary(rng, Probe::Kind(OpKind::Log), Positive),
        "l2_norm" => unary(rng, Probe::Kind(OpKind::L2Norm), AwayFromZero),
        "scale" => unary(rng, Probe::Kind(OpKind::Scale { factor: -1.7 }), Signed),
        "recip" => unary(rng, Probe::Recip, Positive),
        "add_scalar" => unary(rng, Probe::AddScalar, Signed),
        "clamp" => {
            // keep clear of the clamp bounds at +-0.5
            let s = rand_shape(rng);
            let mut t = rand_tensor(rng, &s, Signed);
            for v in t.data_mut() {
                if (v.abs() - 0.5).abs() < 0.05 {
                    *v *= 0.5;
                }
            }
            Case { probe: Probe::Clamp, inputs: vec![t], out_shape: vec![] }
        }
        "transpose" => {
            let s = [rng.random_range(1..=4), rng.random_range(1..=4)];
            Case { probe: Probe::Transpose, inputs: vec![rand_tensor(rng, &s, Signed)], out_shape: vec![] }
        }
        "expand" => {
            let s = rand_shape(rng);
            let axis = rng.random_range(0..s.len());
            let mut small = s.clone();
            small[axis] = 1;
            let mut big = small.clone();
            big[axis] = rng.random_range(2..=4);
            Case { probe: Probe::Expand, inputs: vec![rand_tensor(rng, &small, Signed)], out_shape: big }
        }
        "sum_to" => {
            let s = rand_shape(rng);
            let axis = rng.random_range(0..s.len());
            let mut small = s.clone();
            small[axis] = 1;
            Case { probe: Probe::SumTo, inputs: vec![rand_tensor(rng, &s, Signed)], out_shape: small }
        }
        "slice" => {
            let s = rand_shape(rng);
            let axis = rng.random_range(0..s.len());
            let start = rng.random_range(0..s[axis]);
            let len = rng.random_range(1..=s[axis] - start);
            Case { probe: Probe::Slice { axis, start, len }, inputs: vec![rand_tensor(rng, &s, Signed)], out_shape: vec![] }
        }
        "embed" => {
            let s = rand_shape(rng);
            let axis = rng.random_range(0..s.len());
            let start = rng.random_range(0..=2);
            let total = s[axis] + start + rng.random_range(0..=2);
            Case { probe: Probe::Embed { axis, start, total }, inputs: vec![rand_tensor(rng, &s, Signed)], out_shape: vec![] }
        }
        "row_l2_norm" => {
            let s = [rng.random_range(1..=4), rng.random_range(1..=4)];
            Case { probe: Probe::RowNorm, inputs: vec![rand_tensor(rng, &s, AwayFromZero)], out_shape: vec![] }
        }
        other => panic!("no generator for {other}"),
    }
}

pub const OPS: &[&str] = &[
    "matmul",
    "conv2d",
    "conv_transpose2d",
    "conv2d_weight_grad",
    "add",
    "sub",
    "mul",
    "div",
    "concat",
    "leaky_relu",
    "relu",
    "sigmoid",
    "mean",
    "sum",
    "square",
    "sqrt",
    "log",
    "l2_norm",
    "scale",
    "recip",
    "add_scalar",
    "clamp",
    "transpose",
    "expand",
    "sum_to",
    "slice",
    "embed",
    "row_l2_norm",
];

/// Ops whose worst relative error over `CASES` random cases exceeds `tol`.
pub fn first_order_failures<T: Element>(tol: f64, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for &op in OPS {
        let mut worst: f64 = 0.0;
        for _ in 0..CASES {
            let case = make_case(op, &mut rng);
            worst = worst.max(check_case::<T>(&case, &mut rng));
        }
        if worst > tol {
            failures.push(format!("{op}: worst relative error {worst:.3e}"));
        }
    }
    failures
}

/// Worst deviation of the second-order linear-critic gradient from its
/// closed form, relative to `max(|expected|, 1)`, over `CASES` random critics.
pub fn linear_critic_worst_error<T: Element>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let m = rng.random_range(1..=8);
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (got, want) = linear_critic_penalty_grad::<T>(&w);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    worst
}

/// `D(v) = w . v` has input gradient `w`, so the penalty `(|w| - 1)^2` has
/// parameter gradient `2 (|w| - 1) w / |w|`.
pub fn linear_critic_penalty_grad<T: Element>(w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let g = Graph::<T>::new();
    let m = w.len();
    let wv = g.param(&Tensor::new([1, m], w.iter().map(|&v| T::lit(v)).collect()).unwrap());
    let v = g.param(&Tensor::new([m, 1], (0..m).map(|i| T::lit(0.1 * i as f64 - 0.3)).collect()).unwrap());
    let d = wv.matmul(v).unwrap().sum();
    let gv = backward(d, &[v], true).unwrap()[0];
    let penalty = gv.l2_norm().add_scalar(-T::one()).square();
    let gw = backward(penalty, &[wv], false).unwrap()[0].value();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let expected = w.iter().map(|x| 2.0 * (norm - 1.0) * x / norm).collect();
    (gw.data().iter().map(|x| x.as_f64()).collect(), expected)
}
