//! Forward and backward kernels on plain tensors. Everything here is a pure
//! function; the autodiff tape and the eager executor both call into it.

use crate::blocks::ConvSpec;
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

pub(crate) fn conv_out_dim(dim: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = dim + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_output_shape(input: Shape, spec: &ConvSpec) -> Result<Shape> {
    if input.c != spec.in_channels {
        return Err(shape_err!(
            "conv expects {} input channels, got {}",
            spec.in_channels,
            input.c
        ));
    }
    let oh = conv_out_dim(input.h, spec.kernel, spec.stride, spec.padding);
    let ow = conv_out_dim(input.w, spec.kernel, spec.stride, spec.padding);
    match (oh, ow) {
        (Some(h), Some(w)) if h > 0 && w > 0 => Ok(Shape::new(input.n, spec.out_channels, h, w)),
        _ => Err(shape_err!(
            "conv {}x{} stride {} padding {} yields a non-positive output for input {input}",
            spec.kernel,
            spec.kernel,
            spec.stride,
            spec.padding
        )),
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
#[inline]
fn valid_range(out: usize, inp: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // input index = o * stride + k - pad must lie in [0, inp)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if inp + pad > k {
        ((inp + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col<T: Real>(src: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, col: &mut [T]) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let ocount = oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(oh, h, ky, s, p);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(ow, w, kx, s, p);
                let dst = &mut col[row * ocount..(row + 1) * ocount];
                for oy in 0..oh {
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if oy < ylo || oy >= yhi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let iy = oy * s + ky - p;
                    let srow = &plane[iy * w..(iy + 1) * w];
                    drow[..xlo].fill(T::zero());
                    drow[xhi..].fill(T::zero());
                    if s == 1 {
                        let ix0 = xlo + kx - p;
                        drow[xlo..xhi].copy_from_slice(&srow[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = srow[ox * s + kx - p];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, dst: &mut [T]) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let ocount = oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(oh, h, ky, s, p);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(ow, w, kx, s, p);
                let src = &col[row * ocount..(row + 1) * ocount];
                for oy in ylo..yhi {
                    let iy = oy * s + ky - p;
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    let drow = &mut plane[iy * w..(iy + 1) * w];
                    for ox in xlo..xhi {
                        drow[ox * s + kx - p] += srow[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1 && spec.padding == 0
}

pub fn check_conv_params<T: Real>(spec: &ConvSpec, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let ws = Shape::new(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel);
    if weight.shape() != ws {
        return Err(shape_err!("conv weight should be {ws}, got {}", weight.shape()));
    }
    if bias.shape().numel() != spec.out_channels {
        return Err(shape_err!(
            "conv bias should hold {} values, got {}",
            spec.out_channels,
            bias.shape().numel()
        ));
    }
    Ok(())
}

/// Cross-correlation with bias, NCHW input, `[out, in, k, k]` weights.
pub fn conv2d<T: Real>(x: &Tensor<T>, spec: &ConvSpec, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    check_conv_params(spec, weight, bias)?;
    let os = conv_output_shape(x.shape(), spec)?;
    let is = x.shape();
    let kdim = spec.in_channels * spec.kernel * spec.kernel;
    let ocount = os.plane();
    let mut out = Tensor::zeros(os);
    let mut col = if is_pointwise(spec) { Vec::new() } else { vec![T::zero(); kdim * ocount] };
    for n in 0..is.n {
        let dst = out.sample_mut(n);
        for (co, plane) in dst.chunks_mut(ocount).enumerate() {
            plane.fill(bias.data()[co]);
        }
        let colref: &[T] = if is_pointwise(spec) {
            x.sample(n)
        } else {
            im2col(x.sample(n), is.c, is.h, is.w, spec, os.h, os.w, &mut col);
            &col
        };
        T::gemm(spec.out_channels, kdim, ocount, T::one(), weight.data(), false, colref, false, T::one(), dst);
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let is = x.shape();
    let os = grad_out.shape();
    let kdim = spec.in_channels * spec.kernel * spec.kernel;
    let ocount = os.plane();
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1));
    let mut gx = Tensor::zeros(if need_input { is } else { Shape::new(0, 0, 0, 0) });
    let pointwise = is_pointwise(spec);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * ocount] };
    let mut dcol = if pointwise || !need_input { Vec::new() } else { vec![T::zero(); kdim * ocount] };
    for n in 0..is.n {
        let g = grad_out.sample(n);
        for (co, plane) in g.chunks(ocount).enumerate() {
            gb.data_mut()[co] += plane.iter().copied().sum();
        }
        let colref: &[T] = if pointwise {
            x.sample(n)
        } else {
            im2col(x.sample(n), is.c, is.h, is.w, spec, os.h, os.w, &mut col);
            &col
        };
        T::gemm(spec.out_channels, ocount, kdim, T::one(), g, false, colref, true, T::one(), gw.data_mut());
        if need_input {
            if pointwise {
                T::gemm(kdim, spec.out_channels, ocount, T::one(), weight.data(), true, g, false, T::zero(), gx.sample_mut(n));
            } else {
                T::gemm(kdim, spec.out_channels, ocount, T::one(), weight.data(), true, g, false, T::zero(), &mut dcol);
                col2im(&dcol, is.c, is.h, is.w, spec, os.h, os.w, gx.sample_mut(n));
            }
        }
    }
    ConvGrads { input: gx, weight: gw, bias: gb }
}

/// Interpolation taps for align-corners-false resampling along one axis.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h < s.h || out_w < s.w {
        return Err(shape_err!(
            "bilinear upsample target {out_h}x{out_w} is smaller than source {}x{}",
            s.h,
            s.w
        ));
    }
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    let mut out = Tensor::zeros(s.with_hw(out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64_lossy(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::from_f64_lossy(lx);
                    let top = src[y0 * s.w + x0] * (T::one() - lx) + src[y0 * s.w + x1] * lx;
                    let bot = src[y1 * s.w + x0] * (T::one() - lx) + src[y1 * s.w + x1] * lx;
                    dst[oy * out_w + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_bilinear_backward<T: Real>(grad_out: &Tensor<T>, src: Shape) -> Tensor<T> {
    let os = grad_out.shape();
    let ty = bilinear_taps(src.h, os.h);
    let tx = bilinear_taps(src.w, os.w);
    let mut gx = Tensor::zeros(src);
    for n in 0..src.n {
        for c in 0..src.c {
            let g = grad_out.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64_lossy(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::from_f64_lossy(lx);
                    let v = g[oy * os.w + ox];
                    let top = v * (T::one() - ly);
                    let bot = v * ly;
                    dst[y0 * src.w + x0] += top * (T::one() - lx);
                    dst[y0 * src.w + x1] += top * lx;
                    dst[y1 * src.w + x0] += bot * (T::one() - lx);
                    dst[y1 * src.w + x1] += bot * lx;
                }
            }
        }
    }
    gx
}

/// Per-channel spatial mean, `[n, c, h, w] -> [n, c, 1, 1]`.
/// Per-channel spatial mean, accumulated relative to the first element so a
/// constant plane pools to exactly its value.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::one() / T::from_usize(s.plane()).unwrap();
    Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
        let p = x.plane(n, c);
        let x0 = p[0];
        x0 + p.iter().map(|&v| v - x0).sum::<T>() * inv
    })
}

pub fn global_avg_pool_backward<T: Real>(grad_out: &Tensor<T>, src: Shape) -> Tensor<T> {
    let inv = T::one() / T::from_usize(src.plane()).unwrap();
    let mut gx = Tensor::zeros(src);
    for n in 0..src.n {
        for c in 0..src.c {
            let g = grad_out.at(n, c, 0, 0) * inv;
            gx.plane_mut(n, c).fill(g);
        }
    }
    gx
}

/// Non-overlapping `k x k` mean pooling; trailing rows/columns that do not
/// fill a window are dropped.
pub fn avg_pool<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if k == 0 || s.h < k || s.w < k {
        return Err(shape_err!("{k}x{k} pooling needs at least {k}x{k} input, got {s}"));
    }
    let (oh, ow) = (s.h / k, s.w / k);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    Ok(Tensor::from_fn(s.with_hw(oh, ow), |n, c, oy, ox| {
        let p = x.plane(n, c);
        let x0 = p[oy * k * s.w + ox * k];
        let mut acc = T::zero();
        for y in oy * k..(oy + 1) * k {
            for xx in ox * k..(ox + 1) * k {
                acc += p[y * s.w + xx] - x0;
            }
        }
        x0 + acc * inv
    }))
}

pub fn avg_pool_backward<T: Real>(grad_out: &Tensor<T>, src: Shape, k: usize) -> Tensor<T> {
    let os = grad_out.shape();
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut gx = Tensor::zeros(src);
    for n in 0..src.n {
        for c in 0..src.c {
            let g = grad_out.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let v = g[oy * os.w + ox] * inv;
                    for y in oy * k..(oy + 1) * k {
                        for xx in ox * k..(ox + 1) * k {
                            dst[y * src.w + xx] += v;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// 2x2 stride-2 max pooling; returns the output and flat argmax indices.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(shape_err!("2x2 max pooling needs at least 2x2 input, got {s}"));
    }
    let os = s.with_hw(s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    let mut arg = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = x.index(n, c, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.index(n, c, 2 * oy + dy, 2 * ox + dx);
                        if x.data()[i] > x.data()[best] || x.data()[i].is_nan() {
                            best = i;
                        }
                    }
                    out.set(n, c, oy, ox, x.data()[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((out, arg))
}

/// Normalization statistics captured by a training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased per-channel variance, for running statistics.
    pub var_unbiased: Vec<T>,
}

pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let s = x.shape();
    check_bn_params(s, gamma, beta)?;
    let m = s.n * s.plane();
    let mf = T::from_usize(m).unwrap();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += x.plane(n, c).iter().copied().sum::<T>();
        }
        mean[c] = acc / mf;
        let mut sq = T::zero();
        for n in 0..s.n {
            for &v in x.plane(n, c) {
                let d = v - mean[c];
                sq += d * d;
            }
        }
        var[c] = sq / mf;
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + T::from_f64_lossy(eps)).sqrt())
        .collect();
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            let src = x.plane(n, c);
            let xh = normalized.plane_mut(n, c);
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = (v - mean[c]) * inv_std[c];
            }
            let xh = normalized.plane(n, c).to_vec();
            for (o, v) in out.plane_mut(n, c).iter_mut().zip(xh) {
                *o = g * v + b;
            }
        }
    }
    let var_unbiased = if m > 1 {
        var.iter().map(|&v| v * mf / T::from_usize(m - 1).unwrap()).collect()
    } else {
        var.clone()
    };
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            mean,
            var_unbiased,
        },
    ))
}

fn check_bn_params<T: Real>(s: Shape, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape().numel() != s.c || beta.shape().numel() != s.c {
        return Err(shape_err!(
            "batch norm over {} channels got affine parameters of {} and {} values",
            s.c,
            gamma.shape().numel(),
            beta.shape().numel()
        ));
    }
    Ok(())
}

/// Inference-mode batch norm using running statistics.
pub fn batch_norm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    let s = x.shape();
    check_bn_params(s, gamma, beta)?;
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|&v| T::one() / (v + T::from_f64_lossy(eps)).sqrt())
        .collect();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b, m, is) = (gamma.data()[c], beta.data()[c], running_mean[c], inv_std[c]);
            for (o, &v) in out.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                *o = g * (v - m) * is + b;
            }
        }
    }
    Ok((out, inv_std))
}

/// Gradients of a training-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Real>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = grad_out.shape();
    let mf = T::from_usize(s.n * s.plane()).unwrap();
    let mut gx = Tensor::zeros(s);
    let mut gg = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    let mut gb = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for c in 0..s.c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for n in 0..s.n {
            for (&g, &xh) in grad_out.plane(n, c).iter().zip(cache.normalized.plane(n, c)) {
                sum_g += g;
                sum_gx += g * xh;
            }
        }
        gb.data_mut()[c] = sum_g;
        gg.data_mut()[c] = sum_gx;
        let k = gamma.data()[c] * cache.inv_std[c] / mf;
        for n in 0..s.n {
            let g = grad_out.plane(n, c);
            let xh = cache.normalized.plane(n, c);
            for ((d, &gv), &xv) in gx.plane_mut(n, c).iter_mut().zip(g).zip(xh) {
                *d = k * (mf * gv - sum_g - xv * sum_gx);
            }
        }
    }
    (gx, gg, gb)
}

/// Broadcast-compatible shape check: `b` must equal `a` on every axis or be 1
/// there, with height and width broadcasting together.
pub fn check_broadcast(a: Shape, b: Shape) -> Result<()> {
    let ok_axis = |x: usize, y: usize| y == x || y == 1;
    let spatial_ok = (b.h == a.h && b.w == a.w) || (b.h == 1 && b.w == 1);
    if ok_axis(a.n, b.n) && ok_axis(a.c, b.c) && spatial_ok {
        Ok(())
    } else {
        Err(shape_err!("cannot broadcast {b} onto {a}"))
    }
}

#[inline]
fn bplane_offset(b: Shape, n: usize, c: usize) -> usize {
    let bn = if b.n == 1 { 0 } else { n };
    let bc = if b.c == 1 { 0 } else { c };
    (bn * b.c + bc) * b.plane()
}

/// `f(a, b)` with `b` broadcast onto `a`'s shape.
pub fn broadcast_zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    check_broadcast(sa, sb)?;
    let mut out = Tensor::zeros(sa);
    let scalar_plane = sb.h == 1 && sb.w == 1;
    for n in 0..sa.n {
        for c in 0..sa.c {
            let off = bplane_offset(sb, n, c);
            let src = a.plane(n, c);
            let dst = out.plane_mut(n, c);
            if scalar_plane {
                let bv = b.data()[off];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = f(v, bv);
                }
            } else {
                let bp = &b.data()[off..off + sb.plane()];
                for ((d, &v), &bv) in dst.iter_mut().zip(src).zip(bp) {
                    *d = f(v, bv);
                }
            }
        }
    }
    Ok(out)
}

/// Sum `g` (shaped like `a`) down to the broadcast shape `sb`.
pub fn reduce_to<T: Real>(g: &Tensor<T>, sb: Shape) -> Tensor<T> {
    let sa = g.shape();
    if sa == sb {
        return g.clone();
    }
    let mut out = Tensor::zeros(sb);
    let scalar_plane = sb.h == 1 && sb.w == 1;
    for n in 0..sa.n {
        for c in 0..sa.c {
            let off = bplane_offset(sb, n, c);
            let src = g.plane(n, c);
            if scalar_plane {
                out.data_mut()[off] += src.iter().copied().sum::<T>();
            } else {
                let dst = &mut out.data_mut()[off..off + sb.plane()];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }
    out
}

pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?.shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(shape_err!("cannot concatenate {s} with {first} along channels"));
        }
        c_total += s.c;
    }
    let os = first.with_c(c_total);
    let mut out = Tensor::zeros(os);
    for n in 0..os.n {
        let mut at = 0;
        let dst = out.sample_mut(n);
        for p in parts {
            let src = p.sample(n);
            dst[at..at + src.len()].copy_from_slice(src);
            at += src.len();
        }
    }
    Ok(out)
}

/// Split a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<T: Real>(g: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let s = g.shape();
    let mut outs: Vec<Tensor<T>> = widths.iter().map(|&c| Tensor::zeros(s.with_c(c))).collect();
    for n in 0..s.n {
        let src = g.sample(n);
        let mut at = 0;
        for o in &mut outs {
            let dst = o.sample_mut(n);
            dst.copy_from_slice(&src[at..at + dst.len()]);
            at += dst.len();
        }
    }
    outs
}

/// Mean over channels, `[n, c, h, w] -> [n, 1, h, w]`.
/// Mean over channels. Like the pooling kernels it accumulates offsets from
/// the first channel, so equal channels average to exactly their value.
pub fn channel_mean<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::one() / T::from_usize(s.c).unwrap();
    let mut out = Tensor::zeros(s.with_c(1));
    for n in 0..s.n {
        let first = x.plane(n, 0);
        let mut acc = vec![T::zero(); s.plane()];
        for c in 1..s.c {
            for ((a, &v), &v0) in acc.iter_mut().zip(x.plane(n, c)).zip(first) {
                *a += v - v0;
            }
        }
        for ((d, a), &v0) in out.plane_mut(n, 0).iter_mut().zip(acc).zip(first) {
            *d = v0 + a * inv;
        }
    }
    out
}

/// Direction of the neighbour used by [`neighbor_diff`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighbor {
    Left,
    Right,
    Up,
    Down,
}

impl Neighbor {
    pub const ALL: [Neighbor; 4] = [Neighbor::Left, Neighbor::Right, Neighbor::Up, Neighbor::Down];

    fn offset(self) -> (isize, isize) {
        match self {
            Neighbor::Left => (0, -1),
            Neighbor::Right => (0, 1),
            Neighbor::Up => (-1, 0),
            Neighbor::Down => (1, 0),
        }
    }
}

/// `x[y, x] - x[y + dy, x + dx]` with zeros outside the grid.
pub fn neighbor_diff<T: Real>(x: &Tensor<T>, dir: Neighbor) -> Tensor<T> {
    let s = x.shape();
    let (dy, dx) = dir.offset();
    Tensor::from_fn(s, |n, c, y, xx| {
        let ny = y as isize + dy;
        let nx = xx as isize + dx;
        let nb = if ny >= 0 && nx >= 0 && (ny as usize) < s.h && (nx as usize) < s.w {
            x.at(n, c, ny as usize, nx as usize)
        } else {
            T::zero()
        };
        x.at(n, c, y, xx) - nb
    })
}

pub fn neighbor_diff_backward<T: Real>(g: &Tensor<T>, dir: Neighbor) -> Tensor<T> {
    let s = g.shape();
    let (dy, dx) = dir.offset();
    let mut gx = g.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let ny = y as isize + dy;
                    let nx = xx as isize + dx;
                    if ny >= 0 && nx >= 0 && (ny as usize) < s.h && (nx as usize) < s.w {
                        let i = gx.index(n, c, ny as usize, nx as usize);
                        gx.data_mut()[i] -= g.at(n, c, y, xx);
                    }
                }
            }
        }
    }
    gx
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(v: T) -> T {
    // log(1 + e^v) = max(v, 0) + log1p(e^-|v|)
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}
