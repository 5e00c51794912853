//! Direct convolution kernels for layers with few channels.
//!
//! Channels on the small side are processed in blocks of `L` lanes held in
//! fixed-size arrays, several pixels (or kernel taps) at a time so the
//! accumulators are independent. Inputs are zero-padded once per sample,
//! which keeps bounds tests out of the inner loops. On x86-64 each kernel is
//! also compiled with AVX2 enabled and picked at run time. Subnormals are
//! flushed to zero while a kernel runs.

use crate::element::Element;
use crate::fpenv::FlushDenormals;

const L: usize = 8;
const PX: usize = 8;

type Lanes<T> = [T; L];

#[inline(always)]
fn lanes<T: Element>(s: &[T]) -> &Lanes<T> {
    s[..L].try_into().expect("lane block")
}

#[inline(always)]
fn fma<T: Element>(acc: &mut Lanes<T>, w: &Lanes<T>, x: T) {
    for l in 0..L {
        acc[l] = acc[l] + w[l] * x;
    }
}

/// Geometry shared by the three kernels: the large side is `[c_big, h, w]`
/// and the small side `[c_small, oh, ow]`, related by a forward convolution
/// with `k`, `stride` and `pad`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub n: usize,
    pub c_big: usize,
    pub h: usize,
    pub w: usize,
    pub c_small: usize,
    pub oh: usize,
    pub ow: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Zero-padded copy of `[c, h, w]` with `margin` on every edge.
fn pad_planes<T: Element>(x: &[T], c: usize, h: usize, w: usize, margin: usize, buf: &mut Vec<T>) -> (usize, usize) {
    let (hp, wp) = (h + 2 * margin, w + 2 * margin);
    buf.clear();
    buf.resize(c * hp * wp, T::zero());
    for ch in 0..c {
        for y in 0..h {
            buf[(ch * hp + y + margin) * wp + margin..][..w].copy_from_slice(&x[(ch * h + y) * w..][..w]);
        }
    }
    (hp, wp)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

macro_rules! multiversion {
    ($name:ident, $avx:ident, $body:ident, ($($arg:ident: $ty:ty),*)) => {
        pub(crate) fn $name<T: Element>($($arg: $ty),*) {
            let _flush = FlushDenormals::new();
            #[cfg(target_arch = "x86_64")]
            if has_avx2() {
                // SAFETY: the running CPU supports every enabled feature.
                unsafe { $avx($($arg),*) };
                return;
            }
            $body($($arg),*)
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $avx<T: Element>($($arg: $ty),*) {
            $body($($arg),*)
        }
    };
}

multiversion!(conv2d, conv2d_avx2, conv2d_body, (g: Geom, x: &[T], w: &[T], out: &mut [T]));
multiversion!(conv_transpose2d, conv_transpose2d_avx2, conv_transpose2d_body, (g: Geom, x: &[T], w: &[T], out: &mut [T]));
multiversion!(weight_grad, weight_grad_avx2, weight_grad_body, (g: Geom, big: &[T], small: &[T], out: &mut [T]));

/// `x: [n, c_big, h, w]`, `w: [c_small, c_big, k, k]`, `out: [n, c_small, oh, ow]`.
#[inline(always)]
fn conv2d_body<T: Element>(g: Geom, x: &[T], w: &[T], out: &mut [T]) {
    let k = g.k;
    let rows = g.c_big * k * k;
    let co = g.c_small;
    let nb = co.div_ceil(L);
    let mut wp = vec![T::zero(); nb * rows * L];
    for o in 0..co {
        for r in 0..rows {
            wp[((o / L) * rows + r) * L + o % L] = w[o * rows + r];
        }
    }
    let mut xp = Vec::new();
    let in_sz = g.c_big * g.h * g.w;
    let plane = g.oh * g.ow;
    for b in 0..g.n {
        let (hp, wq) = pad_planes(&x[b * in_sz..][..in_sz], g.c_big, g.h, g.w, g.pad, &mut xp);
        for blk in 0..nb {
            let wb = &wp[blk * rows * L..][..rows * L];
            let used = L.min(co - blk * L);
            let dst = &mut out[(b * co + blk * L) * plane..];
            for oy in 0..g.oh {
                let mut ox = 0;
                while ox < g.ow {
                    let t = match g.ow - ox {
                        r if r >= PX => conv_tile::<T, PX>(&xp, wb, ox, oy, hp, wq, g, used, dst),
                        r if r >= PX / 2 => conv_tile::<T, { PX / 2 }>(&xp, wb, ox, oy, hp, wq, g, used, dst),
                        _ => conv_tile::<T, 1>(&xp, wb, ox, oy, hp, wq, g, used, dst),
                    };
                    ox += t;
                }
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn conv_tile<T: Element, const N: usize>(
    xp: &[T],
    wb: &[T],
    ox: usize,
    oy: usize,
    hp: usize,
    wq: usize,
    g: Geom,
    used: usize,
    dst: &mut [T],
) -> usize {
    let (k, s) = (g.k, g.stride);
    let mut acc = [[T::zero(); L]; N];
    for ci in 0..g.c_big {
        for ki in 0..k {
            let base = (ci * hp + oy * s + ki) * wq + ox * s;
            let src = &xp[base..base + (N - 1) * s + k];
            let wrow = &wb[(ci * k + ki) * k * L..][..k * L];
            for kj in 0..k {
                let wl = lanes(&wrow[kj * L..]);
                for (j, a) in acc.iter_mut().enumerate() {
                    fma(a, wl, src[j * s + kj]);
                }
            }
        }
    }
    let plane = g.oh * g.ow;
    for (j, a) in acc.iter().enumerate() {
        for (l, &v) in a.iter().enumerate().take(used) {
            dst[l * plane + oy * g.ow + ox + j] = v;
        }
    }
    N
}

/// Adjoint of [`conv2d`]: `x: [n, c_small, oh, ow]`, `w: [c_small, c_big, k, k]`,
/// `out: [n, c_big, h, w]`.
///
/// Written as a gather: output pixel `y` receives tap `ki` from input row
/// `(y + pad - ki) / stride` when the division is exact. Pixels of one
/// residue class modulo the stride share their taps, so they are tiled
/// together.
#[inline(always)]
fn conv_transpose2d_body<T: Element>(g: Geom, x: &[T], w: &[T], out: &mut [T]) {
    let (k, s) = (g.k, g.stride);
    let (ci_n, co) = (g.c_small, g.c_big);
    let nb = co.div_ceil(L);
    // wq[blk][ki][kj][ci][lane]
    let mut wq = vec![T::zero(); nb * k * k * ci_n * L];
    for ci in 0..ci_n {
        for o in 0..co {
            for kk in 0..k * k {
                wq[(((o / L) * k * k + kk) * ci_n + ci) * L + o % L] = w[(ci * co + o) * k * k + kk];
            }
        }
    }
    // Shifting by `s * m` keeps `y + p - ki` non-negative; out-of-range
    // source pixels land in the zero margin.
    let m = k.div_ceil(s) + 1;
    let mut xp = Vec::new();
    let in_sz = ci_n * g.oh * g.ow;
    let plane = g.h * g.w;
    for b in 0..g.n {
        let (hq, wqd) = pad_planes(&x[b * in_sz..][..in_sz], ci_n, g.oh, g.ow, m, &mut xp);
        let chan = hq * wqd;
        for blk in 0..nb {
            let wb = &wq[blk * k * k * ci_n * L..][..k * k * ci_n * L];
            let used = L.min(co - blk * L);
            let dst = &mut out[(b * co + blk * L) * plane..];
            for y in 0..g.h {
                for rx in 0..s.min(g.w) {
                    let count = (g.w - rx).div_ceil(s);
                    let mut j = 0;
                    while j < count {
                        let x0 = rx + j * s;
                        let t = match count - j {
                            r if r >= PX => convt_tile::<T, PX>(&xp, wb, y, x0, chan, wqd, m, g, used, dst),
                            r if r >= PX / 2 => convt_tile::<T, { PX / 2 }>(&xp, wb, y, x0, chan, wqd, m, g, used, dst),
                            _ => convt_tile::<T, 1>(&xp, wb, y, x0, chan, wqd, m, g, used, dst),
                        };
                        j += t;
                    }
                }
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn convt_tile<T: Element, const N: usize>(
    xp: &[T],
    wb: &[T],
    y: usize,
    x0: usize,
    chan: usize,
    wqd: usize,
    m: usize,
    g: Geom,
    used: usize,
    dst: &mut [T],
) -> usize {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let ci_n = g.c_small;
    let ty = y + p + s * m;
    let tx = x0 + p + s * m;
    let mut acc = [[T::zero(); L]; N];
    for ki in (0..k).filter(|ki| (ty - ki) % s == 0) {
        let iy = (ty - ki) / s;
        for kj in (0..k).filter(|kj| (tx - kj) % s == 0) {
            let base = iy * wqd + (tx - kj) / s;
            let taps = &wb[(ki * k + kj) * ci_n * L..][..ci_n * L];
            for ci in 0..ci_n {
                let wl = lanes(&taps[ci * L..]);
                let src = &xp[ci * chan + base..][..N];
                for (a, &v) in acc.iter_mut().zip(src) {
                    fma(a, wl, v);
                }
            }
        }
    }
    let plane = g.h * g.w;
    for (j, a) in acc.iter().enumerate() {
        for (l, &v) in a.iter().enumerate().take(used) {
            dst[l * plane + y * g.w + x0 + j * s] = v;
        }
    }
    N
}

/// Kernel gradient: `big: [n, c_big, h, w]`, `small: [n, c_small, oh, ow]`,
/// `out: [c_small, c_big, k, k]` summed over the batch.
#[inline(always)]
fn weight_grad_body<T: Element>(g: Geom, big: &[T], small: &[T], out: &mut [T]) {
    let k = g.k;
    let rows = g.c_big * k * k;
    let cs = g.c_small;
    let nb = cs.div_ceil(L);
    let plane = g.oh * g.ow;
    let mut acc_all = vec![T::zero(); nb * rows * L];
    // small side transposed to [blk][pixel][lane]
    let mut st = vec![T::zero(); nb * plane * L];
    let mut xp = Vec::new();
    let big_sz = g.c_big * g.h * g.w;
    for b in 0..g.n {
        let sm = &small[b * cs * plane..][..cs * plane];
        for o in 0..cs {
            for q in 0..plane {
                st[((o / L) * plane + q) * L + o % L] = sm[o * plane + q];
            }
        }
        let (hp, wq) = pad_planes(&big[b * big_sz..][..big_sz], g.c_big, g.h, g.w, g.pad, &mut xp);
        let offset = |r: usize| {
            let (c, kk) = (r / (k * k), r % (k * k));
            (c * hp + kk / k) * wq + kk % k
        };
        for blk in 0..nb {
            let sb = &st[blk * plane * L..][..plane * L];
            let ab = &mut acc_all[blk * rows * L..][..rows * L];
            let mut r = 0;
            while r < rows {
                let t = match rows - r {
                    left if left >= PX => wgrad_tile::<T, PX>(&xp, sb, ab, r, &offset, g, wq),
                    left if left >= PX / 2 => wgrad_tile::<T, { PX / 2 }>(&xp, sb, ab, r, &offset, g, wq),
                    _ => wgrad_tile::<T, 1>(&xp, sb, ab, r, &offset, g, wq),
                };
                r += t;
            }
        }
    }
    for o in 0..cs {
        for r in 0..rows {
            out[o * rows + r] = acc_all[((o / L) * rows + r) * L + o % L];
        }
    }
}

#[inline(always)]
fn wgrad_tile<T: Element, const N: usize>(
    xp: &[T],
    sb: &[T],
    ab: &mut [T],
    r: usize,
    offset: &impl Fn(usize) -> usize,
    g: Geom,
    wq: usize,
) -> usize {
    let s = g.stride;
    let mut acc = [[T::zero(); L]; N];
    let mut offs = [0usize; N];
    for j in 0..N {
        acc[j] = *lanes(&ab[(r + j) * L..]);
        offs[j] = offset(r + j);
    }
    for oy in 0..g.oh {
        let row = oy * s * wq;
        let gs = &sb[oy * g.ow * L..][..g.ow * L];
        for (ox, gv) in gs.chunks_exact(L).enumerate() {
            let gv = lanes(gv);
            let px = row + ox * s;
            for j in 0..N {
                fma(&mut acc[j], gv, xp[offs[j] + px]);
            }
        }
    }
    for j in 0..N {
        ab[(r + j) * L..][..L].copy_from_slice(&acc[j]);
    }
    N
}
