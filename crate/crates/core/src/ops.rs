//! Forward and backward kernels for every differentiable operation.
//!
//! These are plain functions over [`Tensor`]s. The [`crate::tape`] module
//! records calls to them and chains the backward kernels; the functions are
//! also usable directly for inference-only code. Every kernel walks memory in
//! a fixed order, so results are bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::tensor::{Dims5, Scalar, Tensor};

/// `y += a * x`
#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes
/// while the summation order stays fixed.
#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for k in 0..8 {
            acc[k] += a[k] * b[k];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn sum<T: Scalar>(x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let mut tail = T::zero();
    for &v in xc.remainder() {
        tail += v;
    }
    for a in xc {
        for k in 0..8 {
            acc[k] += a[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn check_shape(op: &'static str, shape: &[usize], expected: &[usize]) -> Result<()> {
    if shape != expected {
        return Err(Error::dim(
            op,
            format!("expected shape {expected:?}, got {shape:?}"),
        ));
    }
    Ok(())
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 1x1x1 pointwise convolution

fn pointwise_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(Dims5, usize)> {
    let d = x.dims5()?;
    let [c_out, c_in] = *w.shape() else {
        return Err(Error::dim(
            "conv_pointwise",
            format!("weight must be (C_out, C_in), got {:?}", w.shape()),
        ));
    };
    if c_in != d.c {
        return Err(Error::dim(
            "conv_pointwise",
            format!("kernel expects {c_in} input channels, feature map has {}", d.c),
        ));
    }
    check_shape("conv_pointwise", b.shape(), &[c_out])?;
    Ok((d, c_out))
}

/// Positions per cache block in the pointwise kernels.
const CHUNK: usize = 512;
/// Positions per register block.
const LANES: usize = 16;

/// `out[o][p] = init[o] + sum_i m(o, i) * src[i][p]` over one block of
/// positions, where `src[i]` starts at `src_off + i * stride` and `out[o]` at
/// `out_off + o * out_stride`. The sum runs over `i` in order.
#[allow(clippy::too_many_arguments)]
#[inline]
fn mix_block<T: Scalar>(
    n_out: usize,
    n_in: usize,
    m: impl Fn(usize, usize) -> T,
    init: impl Fn(usize) -> T,
    src: &[T],
    src_off: usize,
    stride: usize,
    out: &mut [T],
    out_off: usize,
    out_stride: usize,
    n: usize,
) {
    let full = n - n % LANES;
    for o in 0..n_out {
        let dst = &mut out[out_off + o * out_stride..][..n];
        let mut p = 0;
        while p < full {
            let mut acc = [init(o); LANES];
            for i in 0..n_in {
                let a = m(o, i);
                let x = &src[src_off + i * stride + p..][..LANES];
                for l in 0..LANES {
                    acc[l] += a * x[l];
                }
            }
            dst[p..p + LANES].copy_from_slice(&acc);
            p += LANES;
        }
        for q in full..n {
            let mut acc = init(o);
            for i in 0..n_in {
                acc += m(o, i) * src[src_off + i * stride + q];
            }
            dst[q] = acc;
        }
    }
}

/// `out[b,co,t,h,w] = bias[co] + sum_ci w[co,ci] * x[b,ci,t,h,w]`
pub fn conv_pointwise<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, c_out) = pointwise_dims(x, w, bias)?;
    let od = d.with_channels(c_out);
    let s = d.volume();
    let mut out = Tensor::zeros(&od.as_vec());
    let (xs, ws, bs) = (x.data(), w.data(), bias.data());
    let o = out.data_mut();
    for b in 0..d.b {
        for p0 in (0..s).step_by(CHUNK) {
            let n = CHUNK.min(s - p0);
            mix_block(
                c_out,
                d.c,
                |co, ci| ws[co * d.c + ci],
                |co| bs[co],
                xs,
                b * d.c * s + p0,
                s,
                o,
                b * c_out * s + p0,
                s,
                n,
            );
        }
    }
    Ok(out)
}

/// Gradients of [`conv_pointwise`] with respect to `(x, w, bias)`.
pub fn conv_pointwise_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (d, c_out) = pointwise_dims(x, w, bias)?;
    check_shape("conv_pointwise_backward", g.shape(), &d.with_channels(c_out).as_vec())?;
    let s = d.volume();
    let (xs, ws, gs) = (x.data(), w.data(), g.data());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(bias.shape());
    let dxs = dx.data_mut();
    let dws = dw.data_mut();
    let dbs = db.data_mut();
    for b in 0..d.b {
        for p0 in (0..s).step_by(CHUNK) {
            let n = CHUNK.min(s - p0);
            mix_block(
                d.c,
                c_out,
                |ci, co| ws[co * d.c + ci],
                |_| T::zero(),
                gs,
                b * c_out * s + p0,
                s,
                dxs,
                b * d.c * s + p0,
                s,
                n,
            );
            for co in 0..c_out {
                let grow = &gs[(b * c_out + co) * s + p0..][..n];
                dbs[co] += sum(grow);
                for ci in 0..d.c {
                    dws[co * d.c + ci] += dot(grow, &xs[(b * d.c + ci) * s + p0..][..n]);
                }
            }
        }
    }
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// 1x3x3 channel-wise spatial convolution, zero same-padding

fn spatial_dims<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Dims5> {
    let d = x.dims5()?;
    if k.shape() != [d.c, 3, 3] {
        return Err(Error::dim(
            "conv_channelwise_spatial",
            format!("kernel must be ({}, 3, 3), got {:?}", d.c, k.shape()),
        ));
    }
    Ok(d)
}

/// Copies `frame` into `buf`, zeroing column `col` of every row.
fn mask_column<T: Scalar>(frame: &[T], width: usize, col: usize, buf: &mut Vec<T>) {
    buf.clear();
    buf.extend_from_slice(frame);
    for row in buf.chunks_exact_mut(width) {
        row[col] = T::zero();
    }
}

/// Flat index range `[lo, hi)` of output positions whose row offset by `di`
/// stays inside an `h x w` frame, further clipped so `i + off` is in bounds.
#[inline]
fn flat_range(h: usize, w: usize, di: isize, off: isize) -> (usize, usize) {
    let r0 = if di < 0 { (-di) as usize } else { 0 };
    let r1 = if di > 0 { h.saturating_sub(di as usize) } else { h };
    let fr = (h * w) as isize;
    let lo = ((r0 * w) as isize).max(-off);
    let hi = ((r1 * w) as isize).min(fr - off);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// `out[b,c,t,h,w] = sum_{i,j in -1..=1} k[c,i+1,j+1] * x[b,c,t,h+i,w+j]`,
/// reads outside the frame are zero.
///
/// Each tap is one flat shifted axpy over the frame. A horizontal shift would
/// wrap into the neighbouring row, so the source column that the wrap lands
/// on is zeroed in a scratch copy first.
pub fn conv_channelwise_spatial<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let d = spatial_dims(x, k)?;
    let (hh, ww) = (d.h, d.w);
    let fr = d.frame();
    let mut out = Tensor::zeros(x.shape());
    let (xs, ks) = (x.data(), k.data());
    let o = out.data_mut();
    let mut scratch = Vec::with_capacity(fr);
    for b in 0..d.b {
        for c in 0..d.c {
            let kc = &ks[c * 9..c * 9 + 9];
            for t in 0..d.t {
                let base = ((b * d.c + c) * d.t + t) * fr;
                let xp = &xs[base..base + fr];
                let op = &mut o[base..base + fr];
                for dj in -1isize..=1 {
                    let src: &[T] = match dj {
                        1 => {
                            mask_column(xp, ww, 0, &mut scratch);
                            &scratch
                        }
                        -1 => {
                            mask_column(xp, ww, ww - 1, &mut scratch);
                            &scratch
                        }
                        _ => xp,
                    };
                    for di in -1isize..=1 {
                        let off = di * ww as isize + dj;
                        let (lo, hi) = flat_range(hh, ww, di, off);
                        if lo == hi {
                            continue;
                        }
                        let kv = kc[((di + 1) * 3 + dj + 1) as usize];
                        let s0 = (lo as isize + off) as usize;
                        axpy(kv, &src[s0..s0 + (hi - lo)], &mut op[lo..hi]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv_channelwise_spatial`] with respect to `(x, k)`.
pub fn conv_channelwise_spatial_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = spatial_dims(x, k)?;
    same_shape("conv_channelwise_spatial_backward", x, g)?;
    let (hh, ww) = (d.h, d.w);
    let fr = d.frame();
    let mut dx = Tensor::zeros(x.shape());
    let mut dk = Tensor::zeros(k.shape());
    let (xs, ks, gs) = (x.data(), k.data(), g.data());
    let dxs = dx.data_mut();
    let dks = dk.data_mut();
    let mut scratch = Vec::with_capacity(fr);
    for b in 0..d.b {
        for c in 0..d.c {
            for t in 0..d.t {
                let base = ((b * d.c + c) * d.t + t) * fr;
                let xp = &xs[base..base + fr];
                let gp = &gs[base..base + fr];
                let dxp = &mut dxs[base..base + fr];
                for dj in -1isize..=1 {
                    // Outputs whose horizontal source falls outside the frame
                    // get a zero gradient in the scratch copy.
                    let gm: &[T] = match dj {
                        1 => {
                            mask_column(gp, ww, ww - 1, &mut scratch);
                            &scratch
                        }
                        -1 => {
                            mask_column(gp, ww, 0, &mut scratch);
                            &scratch
                        }
                        _ => gp,
                    };
                    for di in -1isize..=1 {
                        let off = di * ww as isize + dj;
                        let (lo, hi) = flat_range(hh, ww, di, off);
                        if lo == hi {
                            continue;
                        }
                        let ki = c * 9 + ((di + 1) * 3 + dj + 1) as usize;
                        let s0 = (lo as isize + off) as usize;
                        let gseg = &gm[lo..hi];
                        dks[ki] += dot(gseg, &xp[s0..s0 + (hi - lo)]);
                        axpy(ks[ki], gseg, &mut dxp[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
    Ok((dx, dk))
}

// ---------------------------------------------------------------------------
// 3x1x1 channel-wise temporal convolution, zero same-padding

fn temporal_dims<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Dims5> {
    let d = x.dims5()?;
    if k.shape() != [d.c, 3] {
        return Err(Error::dim(
            "conv_channelwise_temporal",
            format!("kernel must be ({}, 3), got {:?}", d.c, k.shape()),
        ));
    }
    Ok(d)
}

/// `out[b,c,t,h,w] = sum_{d in -1..=1} k[c,d+1] * x[b,c,t+d,h,w]`, frames
/// outside the sequence are zero.
pub fn conv_channelwise_temporal<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let d = temporal_dims(x, k)?;
    let fr = d.frame();
    let mut out = Tensor::zeros(x.shape());
    let (xs, ks) = (x.data(), k.data());
    let o = out.data_mut();
    for b in 0..d.b {
        for c in 0..d.c {
            let base = (b * d.c + c) * d.volume();
            for t in 0..d.t {
                let dst = &mut o[base + t * fr..][..fr];
                for dt in -1isize..=1 {
                    let src = t as isize + dt;
                    if src < 0 || src >= d.t as isize {
                        continue;
                    }
                    let kv = ks[c * 3 + (dt + 1) as usize];
                    axpy(kv, &xs[base + src as usize * fr..][..fr], dst);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv_channelwise_temporal`] with respect to `(x, k)`.
pub fn conv_channelwise_temporal_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = temporal_dims(x, k)?;
    same_shape("conv_channelwise_temporal_backward", x, g)?;
    let fr = d.frame();
    let mut dx = Tensor::zeros(x.shape());
    let mut dk = Tensor::zeros(k.shape());
    let (xs, ks, gs) = (x.data(), k.data(), g.data());
    let dxs = dx.data_mut();
    let dks = dk.data_mut();
    for b in 0..d.b {
        for c in 0..d.c {
            let base = (b * d.c + c) * d.volume();
            for t in 0..d.t {
                let gf = &gs[base + t * fr..][..fr];
                for dt in -1isize..=1 {
                    let src = t as isize + dt;
                    if src < 0 || src >= d.t as isize {
                        continue;
                    }
                    let ki = c * 3 + (dt + 1) as usize;
                    let off = base + src as usize * fr;
                    dks[ki] += dot(gf, &xs[off..off + fr]);
                    axpy(ks[ki], gf, &mut dxs[off..off + fr]);
                }
            }
        }
    }
    Ok((dx, dk))
}

// ---------------------------------------------------------------------------
// Frame-by-frame subtraction

/// `out[t] = cur[t] - pre_modeled[t-1]` for `t >= 1`; the first frame is zero.
pub fn shifted_subtract<T: Scalar>(cur: &Tensor<T>, pre_modeled: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("shifted_subtract", cur, pre_modeled)?;
    let d = cur.dims5()?;
    let fr = d.frame();
    let mut out = Tensor::zeros(cur.shape());
    let (cs, ps) = (cur.data(), pre_modeled.data());
    let o = out.data_mut();
    for bc in 0..d.b * d.c {
        let base = bc * d.volume();
        for t in 1..d.t {
            let dst = &mut o[base + t * fr..][..fr];
            let cur_f = &cs[base + t * fr..][..fr];
            let pre_f = &ps[base + (t - 1) * fr..][..fr];
            for ((o, &a), &p) in dst.iter_mut().zip(cur_f).zip(pre_f) {
                *o = a - p;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`shifted_subtract`] with respect to `(cur, pre_modeled)`.
pub fn shifted_subtract_backward<T: Scalar>(g: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = g.dims5()?;
    let fr = d.frame();
    let mut dcur = Tensor::zeros(g.shape());
    let mut dpre = Tensor::zeros(g.shape());
    let gs = g.data();
    {
        let dc = dcur.data_mut();
        let dp = dpre.data_mut();
        for bc in 0..d.b * d.c {
            let base = bc * d.volume();
            for t in 1..d.t {
                let gf = &gs[base + t * fr..][..fr];
                dc[base + t * fr..][..fr].copy_from_slice(gf);
                for (p, &v) in dp[base + (t - 1) * fr..][..fr].iter_mut().zip(gf) {
                    *p = -v;
                }
            }
        }
    }
    Ok((dcur, dpre))
}

// ---------------------------------------------------------------------------
// Elementwise

pub fn add<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", x, y)?;
    let mut out = x.clone();
    out.add_assign(y);
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

// ---------------------------------------------------------------------------
// Pooling

/// 2x2 spatial mean pool with stride 2. Odd trailing rows/columns are dropped.
pub fn mean_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.dims5()?;
    if d.h < 2 || d.w < 2 {
        return Err(Error::dim(
            "mean_pool2",
            format!("frame {}x{} too small to pool", d.h, d.w),
        ));
    }
    let (oh, ow) = (d.h / 2, d.w / 2);
    let od = Dims5 { h: oh, w: ow, ..d };
    let quarter = T::lit(0.25);
    let xs = x.data();
    let mut out = Tensor::zeros(&od.as_vec());
    let o = out.data_mut();
    for p in 0..d.b * d.c * d.t {
        let src = &xs[p * d.frame()..][..d.frame()];
        let dst = &mut o[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            let r0 = &src[2 * y * d.w..];
            let r1 = &src[(2 * y + 1) * d.w..];
            for xx in 0..ow {
                dst[y * ow + xx] = quarter * ((r0[2 * xx] + r0[2 * xx + 1]) + (r1[2 * xx] + r1[2 * xx + 1]));
            }
        }
    }
    Ok(out)
}

pub fn mean_pool2_backward<T: Scalar>(x_shape: &[usize], g: &Tensor<T>) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.dims5()?;
    let (oh, ow) = (d.h / 2, d.w / 2);
    check_shape("mean_pool2_backward", g.shape(), &Dims5 { h: oh, w: ow, ..d }.as_vec())?;
    let quarter = T::lit(0.25);
    let gs = g.data();
    let dxs = dx.data_mut();
    for p in 0..d.b * d.c * d.t {
        let gp = &gs[p * oh * ow..][..oh * ow];
        let dst = &mut dxs[p * d.frame()..][..d.frame()];
        for y in 0..oh {
            for xx in 0..ow {
                let v = quarter * gp[y * ow + xx];
                dst[2 * y * d.w + 2 * xx] = v;
                dst[2 * y * d.w + 2 * xx + 1] = v;
                dst[(2 * y + 1) * d.w + 2 * xx] = v;
                dst[(2 * y + 1) * d.w + 2 * xx + 1] = v;
            }
        }
    }
    Ok(dx)
}

/// Mean over `(T, H, W)`; returns `(B, C)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.dims5()?;
    let s = d.volume();
    let inv = T::one() / T::lit(s as f64);
    let xs = x.data();
    let data = (0..d.b * d.c).map(|p| sum(&xs[p * s..][..s]) * inv).collect();
    Tensor::from_vec(&[d.b, d.c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(x_shape: &[usize], g: &Tensor<T>) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.dims5()?;
    check_shape("global_avg_pool_backward", g.shape(), &[d.b, d.c])?;
    let s = d.volume();
    let inv = T::one() / T::lit(s as f64);
    let gs = g.data();
    for (p, chunk) in dx.data_mut().chunks_exact_mut(s).enumerate() {
        chunk.fill(gs[p] * inv);
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Dense head

fn linear_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [n, c_in] = *x.shape() else {
        return Err(Error::dim("linear", format!("input must be (B, C_in), got {:?}", x.shape())));
    };
    let [c_out, wc] = *w.shape() else {
        return Err(Error::dim("linear", format!("weight must be (C_out, C_in), got {:?}", w.shape())));
    };
    if wc != c_in {
        return Err(Error::dim("linear", format!("weight expects {wc} inputs, got {c_in}")));
    }
    check_shape("linear", b.shape(), &[c_out])?;
    Ok((n, c_in, c_out))
}

/// `out[b, o] = bias[o] + sum_i w[o, i] * x[b, i]`
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c_in, c_out) = linear_dims(x, w, bias)?;
    let (xs, ws, bs) = (x.data(), w.data(), bias.data());
    let data = (0..n * c_out)
        .map(|i| {
            let (b, o) = (i / c_out, i % c_out);
            bs[o] + dot(&ws[o * c_in..][..c_in], &xs[b * c_in..][..c_in])
        })
        .collect();
    Tensor::from_vec(&[n, c_out], data)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c_in, c_out) = linear_dims(x, w, bias)?;
    check_shape("linear_backward", g.shape(), &[n, c_out])?;
    let (xs, ws, gs) = (x.data(), w.data(), g.data());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(bias.shape());
    for b in 0..n {
        for o in 0..c_out {
            let gv = gs[b * c_out + o];
            db.data_mut()[o] += gv;
            axpy(gv, &ws[o * c_in..][..c_in], &mut dx.data_mut()[b * c_in..][..c_in]);
            axpy(gv, &xs[b * c_in..][..c_in], &mut dw.data_mut()[o * c_in..][..c_in]);
        }
    }
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// Losses

/// Row-wise softmax of `(B, K)` logits, stabilized by max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k] = *logits.shape() else {
        return Err(Error::dim("softmax", format!("logits must be (B, K), got {:?}", logits.shape())));
    };
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    debug_assert_eq!(out.numel(), n * k);
    Ok(out)
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidLabel(bad));
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let [n, k] = *logits.shape() else {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("logits must be (B, K), got {:?}", logits.shape()),
        ));
    };
    check_labels(labels, n, k)?;
    let mut total = T::zero();
    for (row, &l) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        total += lse - row[l];
    }
    Ok(Tensor::scalar(total / T::lit(n as f64)))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    g: T,
) -> Result<Tensor<T>> {
    let mut p = softmax(logits)?;
    let [n, k] = *logits.shape() else { unreachable!() };
    check_labels(labels, n, k)?;
    let scale = g / T::lit(n as f64);
    for (row, &l) in p.data_mut().chunks_exact_mut(k).zip(labels) {
        row[l] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(p)
}

/// `sum_b weights[b] * ||x_b||_1` where `x_b` is sample `b` of the leading
/// axis. With unit weights and a single sample this is the plain L1 norm.
pub fn weighted_sample_l1<T: Scalar>(x: &Tensor<T>, weights: &[T]) -> Result<Tensor<T>> {
    let n = sample_count(x, weights)?;
    let per = x.numel() / n;
    let mut total = T::zero();
    for (chunk, &wt) in x.data().chunks_exact(per).zip(weights) {
        if wt == T::zero() {
            continue;
        }
        let norm: T = chunk.iter().map(|v| v.abs()).sum();
        total += wt * norm;
    }
    Ok(Tensor::scalar(total))
}

pub fn weighted_sample_l1_backward<T: Scalar>(x: &Tensor<T>, weights: &[T], g: T) -> Result<Tensor<T>> {
    let n = sample_count(x, weights)?;
    let per = x.numel() / n;
    let mut dx = Tensor::zeros(x.shape());
    for ((dst, src), &wt) in dx
        .data_mut()
        .chunks_exact_mut(per)
        .zip(x.data().chunks_exact(per))
        .zip(weights)
    {
        let s = g * wt;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = if v > T::zero() {
                s
            } else if v < T::zero() {
                -s
            } else {
                T::zero()
            };
        }
    }
    Ok(dx)
}

fn sample_count<T: Scalar>(x: &Tensor<T>, weights: &[T]) -> Result<usize> {
    let n = x.shape().first().copied().unwrap_or(1);
    if weights.len() != n {
        return Err(Error::dim(
            "weighted_sample_l1",
            format!("{} weights for {n} samples", weights.len()),
        ));
    }
    Ok(n)
}

/// Sum of absolute values of a whole tensor (one sample's `||F*||_1`).
pub fn l1_norm<T: Scalar>(x: &Tensor<T>) -> T {
    x.data().iter().map(|v| v.abs()).sum()
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.data().iter().copied().sum())
}
