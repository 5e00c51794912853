//! Raw forward kernels. Each takes and returns plain tensors; the graph
//! layer decides what gets recorded.

use crate::direct;
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{strides, Tensor};

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

pub(crate) fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub(crate) fn zip<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(mismatch("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn transpose<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(mismatch("transpose", format!("expected rank 2, got {:?}", a.shape())));
    }
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

pub(crate) fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| mismatch("concat", "no inputs".into()))?;
    if axis >= first.rank() {
        return Err(mismatch("concat", format!("axis {axis} out of range for {:?}", first.shape())));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(mismatch("concat", format!("{:?} vs {:?} on axis {axis}", first.shape(), p.shape())));
        }
        shape[axis] += p.shape()[axis];
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn slice<T: Element>(a: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= a.rank() || start + len > a.shape()[axis] {
        return Err(mismatch("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, a.shape())));
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let full = a.shape()[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of `slice`: place `a` at `start` inside zeros of extent `total` on `axis`.
pub(crate) fn embed<T: Element>(a: &Tensor<T>, axis: usize, start: usize, total: usize) -> Result<Tensor<T>> {
    if axis >= a.rank() || start + a.shape()[axis] > total {
        return Err(mismatch("embed", format!("{:?} at {start} into extent {total} on axis {axis}", a.shape())));
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let len = a.shape()[axis];
    let mut shape = a.shape().to_vec();
    shape[axis] = total;
    let mut out = vec![T::zero(); shape.iter().product()];
    for o in 0..outer {
        let dst = (o * total + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&a.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Ok(Tensor::from_parts(shape, out))
}

fn check_broadcast(op: &'static str, small: &[usize], big: &[usize]) -> Result<()> {
    let ok = small.len() == big.len() && small.iter().zip(big).all(|(&s, &b)| s == b || s == 1);
    if !ok {
        return Err(mismatch(op, format!("{small:?} is not broadcastable to {big:?}")));
    }
    Ok(())
}

/// Walk every index of `big`, yielding the flat offsets in `big` and in the
/// broadcast `small` (stride zero along expanded axes).
fn for_each_broadcast(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = big.len();
    let numel: usize = big.iter().product();
    if numel == 0 {
        return;
    }
    let ss = strides(small);
    let sstr: Vec<usize> = (0..rank).map(|i| if small[i] == 1 { 0 } else { ss[i] }).collect();
    // innermost axis handled as a tight loop
    let last = rank.saturating_sub(1);
    let inner = if rank == 0 { 1 } else { big[last] };
    let inner_stride = if rank == 0 { 0 } else { sstr[last] };
    let mut idx = vec![0usize; rank];
    let mut flat = 0;
    while flat < numel {
        let base: usize = (0..last).map(|i| idx[i] * sstr[i]).sum();
        for j in 0..inner {
            f(flat + j, base + j * inner_stride);
        }
        flat += inner;
        // carry
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < big[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub(crate) fn expand<T: Element>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    check_broadcast("expand", a.shape(), shape)?;
    let mut out = vec![T::zero(); shape.iter().product()];
    let src = a.data();
    for_each_broadcast(a.shape(), shape, |o, i| out[o] = src[i]);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

pub(crate) fn sum_to<T: Element>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    check_broadcast("sum_to", shape, a.shape())?;
    let mut out = vec![T::zero(); shape.iter().product()];
    let src = a.data();
    for_each_broadcast(shape, a.shape(), |i, o| out[o] = out[o] + src[i]);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Geometry of a strided 2-D convolution from a "big" map to a "small" one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Standard convolution output extent, `None` when the kernel does not fit.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Transposed convolution output extent `(n - 1) * s - 2p + k`.
pub fn conv_transpose_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    ((n.checked_sub(1)? * stride) + k).checked_sub(2 * pad).filter(|&v| v > 0)
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` whose input column `ox * stride + kj - pad` lies
    /// inside the image, as a half-open range.
    fn valid_ox(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = if self.w + self.pad > kj { ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let p = self.cols_len();
        for c in 0..self.channels {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_ox(kj);
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize || lo == hi {
                            line.fill(T::zero());
                            continue;
                        }
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let start = iy as usize * self.w + lo * self.stride + kj - self.pad;
                        let src = &plane[start..start + (hi - lo - 1) * self.stride + 1];
                        match self.stride {
                            1 => line[lo..hi].copy_from_slice(src),
                            2 => gather::<T, 2>(&mut line[lo..hi], src),
                            s => line[lo..hi].iter_mut().zip(src.iter().step_by(s)).for_each(|(v, &x)| *v = x),
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], x: &mut [T]) {
        let p = self.cols_len();
        for c in 0..self.channels {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_ox(kj);
                    if lo == hi {
                        continue;
                    }
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let start = iy as usize * self.w + lo * self.stride + kj - self.pad;
                        let dst = &mut plane[start..start + (hi - lo - 1) * self.stride + 1];
                        let src = &src[oy * self.ow + lo..oy * self.ow + hi];
                        match self.stride {
                            1 => dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v),
                            2 => scatter_add::<T, 2>(dst, src),
                            s => dst.iter_mut().step_by(s).zip(src).for_each(|(d, &v)| *d = *d + v),
                        }
                    }
                }
            }
        }
    }
}

/// `dst[i] = src[i * S]`.
#[inline]
fn gather<T: Element, const S: usize>(dst: &mut [T], src: &[T]) {
    for (d, c) in dst.iter_mut().zip(src.chunks(S)) {
        *d = c[0];
    }
}

/// `dst[i * S] += src[i]`.
#[inline]
fn scatter_add<T: Element, const S: usize>(dst: &mut [T], src: &[T]) {
    for (c, &v) in dst.chunks_mut(S).zip(src) {
        c[0] = c[0] + v;
    }
}

/// Which convolution implementation to run. The direct kernels are faster
/// at every width this crate is used with; im2col plus gemm is kept as a
/// cross-check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ConvPath {
    Direct,
    #[cfg_attr(not(test), allow(dead_code))]
    Im2col,
}

const CONV_PATH: ConvPath = ConvPath::Direct;

fn dims4(op: &'static str, t: &[usize]) -> Result<[usize; 4]> {
    match t {
        &[a, b, c, d] => Ok([a, b, c, d]),
        other => Err(mismatch(op, format!("expected rank 4, got {other:?}"))),
    }
}

/// `x: [N, C, H, W]`, `w: [Co, C, k, k]` -> `[N, Co, OH, OW]`.
pub(crate) fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    conv2d_via(x, w, stride, pad, CONV_PATH)
}

fn conv2d_via<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize, path: ConvPath) -> Result<Tensor<T>> {
    let [n, c, h, wd] = dims4("conv2d", x.shape())?;
    let [co, ci, k, k2] = dims4("conv2d", w.shape())?;
    if ci != c || k != k2 {
        return Err(mismatch("conv2d", format!("input {:?} with kernel {:?}", x.shape(), w.shape())));
    }
    let (oh, ow) = match (conv_out_len(h, k, stride, pad), conv_out_len(wd, k, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(mismatch("conv2d", format!("kernel {k} stride {stride} pad {pad} on {h}x{wd}"))),
    };
    if path == ConvPath::Direct {
        let mut out = vec![T::zero(); n * co * oh * ow];
        let g = direct::Geom { n, c_big: c, h, w: wd, c_small: co, oh, ow, k, stride, pad };
        direct::conv2d(g, x.data(), w.data(), &mut out);
        return Ok(Tensor::from_parts(vec![n, co, oh, ow], out));
    }
    let g = ConvGeom { channels: c, h, w: wd, k, stride, pad, oh, ow };
    let (rows, p) = (g.cols_rows(), g.cols_len());
    let mut cols = vec![T::zero(); rows * p];
    let mut out = vec![T::zero(); n * co * p];
    let in_sz = c * h * wd;
    for b in 0..n {
        g.im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &mut cols);
        let dst = &mut out[b * co * p..(b + 1) * co * p];
        T::gemm(co, rows, p, T::one(), w.data(), rows as isize, 1, &cols, p as isize, 1, T::zero(), dst, p as isize, 1);
    }
    Ok(Tensor::from_parts(vec![n, co, oh, ow], out))
}

/// `x: [N, Ci, H, W]`, `w: [Ci, Co, k, k]` -> `[N, Co, OH, OW]`, the adjoint
/// of `conv2d` with the same stride and padding. `out_hw` must be an extent
/// that a forward convolution maps back onto `H x W`.
pub(crate) fn conv_transpose2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> Result<Tensor<T>> {
    conv_transpose2d_via(x, w, stride, pad, out_hw, CONV_PATH)
}

fn conv_transpose2d_via<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
    path: ConvPath,
) -> Result<Tensor<T>> {
    let [n, ci, h, wd] = dims4("conv_transpose2d", x.shape())?;
    let [wi, co, k, k2] = dims4("conv_transpose2d", w.shape())?;
    if wi != ci || k != k2 {
        return Err(mismatch("conv_transpose2d", format!("input {:?} with kernel {:?}", x.shape(), w.shape())));
    }
    let (oh, ow) = out_hw;
    if conv_out_len(oh, k, stride, pad) != Some(h) || conv_out_len(ow, k, stride, pad) != Some(wd) {
        return Err(mismatch(
            "conv_transpose2d",
            format!("output {oh}x{ow} inconsistent with input {h}x{wd} (k {k}, stride {stride}, pad {pad})"),
        ));
    }
    if path == ConvPath::Direct {
        let mut out = vec![T::zero(); n * co * oh * ow];
        let g = direct::Geom { n, c_big: co, h: oh, w: ow, c_small: ci, oh: h, ow: wd, k, stride, pad };
        direct::conv_transpose2d(g, x.data(), w.data(), &mut out);
        return Ok(Tensor::from_parts(vec![n, co, oh, ow], out));
    }
    let g = ConvGeom { channels: co, h: oh, w: ow, k, stride, pad, oh: h, ow: wd };
    let (rows, p) = (g.cols_rows(), g.cols_len());
    let mut cols = vec![T::zero(); rows * p];
    let out_sz = co * oh * ow;
    let mut out = vec![T::zero(); n * out_sz];
    for b in 0..n {
        let src = &x.data()[b * ci * p..(b + 1) * ci * p];
        // cols[rows, p] = w^T[rows, ci] * x_b[ci, p]
        T::gemm(rows, ci, p, T::one(), w.data(), 1, rows as isize, src, p as isize, 1, T::zero(), &mut cols, p as isize, 1);
        g.col2im(&cols, &mut out[b * out_sz..(b + 1) * out_sz]);
    }
    Ok(Tensor::from_parts(vec![n, co, oh, ow], out))
}

/// Kernel gradient of `conv2d`: `big: [N, Cb, H, W]`, `small: [N, Cs, OH, OW]`
/// -> `[Cs, Cb, k, k]`.
pub(crate) fn conv2d_weight_grad<T: Element>(
    big: &Tensor<T>,
    small: &Tensor<T>,
    stride: usize,
    pad: usize,
    k: usize,
) -> Result<Tensor<T>> {
    conv2d_weight_grad_via(big, small, stride, pad, k, CONV_PATH)
}

fn conv2d_weight_grad_via<T: Element>(
    big: &Tensor<T>,
    small: &Tensor<T>,
    stride: usize,
    pad: usize,
    k: usize,
    path: ConvPath,
) -> Result<Tensor<T>> {
    let [n, cb, h, wd] = dims4("conv2d_weight_grad", big.shape())?;
    let [n2, cs, oh, ow] = dims4("conv2d_weight_grad", small.shape())?;
    if n != n2 || conv_out_len(h, k, stride, pad) != Some(oh) || conv_out_len(wd, k, stride, pad) != Some(ow) {
        return Err(mismatch(
            "conv2d_weight_grad",
            format!("{:?} and {:?} (k {k}, stride {stride}, pad {pad})", big.shape(), small.shape()),
        ));
    }
    if path == ConvPath::Direct {
        let mut out = vec![T::zero(); cs * cb * k * k];
        let g = direct::Geom { n, c_big: cb, h, w: wd, c_small: cs, oh, ow, k, stride, pad };
        direct::weight_grad(g, big.data(), small.data(), &mut out);
        return Ok(Tensor::from_parts(vec![cs, cb, k, k], out));
    }
    let g = ConvGeom { channels: cb, h, w: wd, k, stride, pad, oh, ow };
    let (rows, p) = (g.cols_rows(), g.cols_len());
    let mut cols = vec![T::zero(); rows * p];
    let mut out = vec![T::zero(); cs * rows];
    let in_sz = cb * h * wd;
    for b in 0..n {
        g.im2col(&big.data()[b * in_sz..(b + 1) * in_sz], &mut cols);
        let gs = &small.data()[b * cs * p..(b + 1) * cs * p];
        let beta = if b == 0 { T::zero() } else { T::one() };
        // out[cs, rows] += gs[cs, p] * cols^T[p, rows]
        T::gemm(cs, p, rows, T::one(), gs, p as isize, 1, &cols, 1, p as isize, beta, &mut out, rows as isize, 1);
    }
    Ok(Tensor::from_parts(vec![cs, cb, k, k], out))
}
