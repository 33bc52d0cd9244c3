//! Forward and backward kernels for the dense ops used by the network.
//!
//! All kernels work on NCHW tensors and are single-threaded; batch members are
//! processed sequentially.

use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        Self { stride, pad, dilation }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub const fn same(k: usize, dilation: usize) -> Self {
        Self { stride: 1, pad: dilation * (k - 1) / 2, dilation }
    }

    pub fn out_size(&self, input: usize, k: usize) -> usize {
        let span = self.dilation * (k - 1) + 1;
        assert!(input + 2 * self.pad >= span, "convolution window larger than padded input");
        (input + 2 * self.pad - span) / self.stride + 1
    }
}

fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    let (s, pad, d) = (g.stride as isize, g.pad as isize, g.dilation as isize);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = oy as isize * s - pad + ky as isize * d;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, dv) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s - pad + kx as isize * d;
                        *dv = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let p = ho * wo;
    let (s, pad, d) = (g.stride as isize, g.pad as isize, g.dilation as isize);
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = oy as isize * s - pad + ky as isize * d;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = ox as isize * s - pad + kx as isize * d;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, g: ConvGeom) -> bool {
    k == 1 && g.stride == 1 && g.pad == 0
}

/// Square-kernel 2-D convolution (cross-correlation). `w` is `[Cout, Cin, k, k]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: ConvGeom) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (co, ci, k, k2) = w.dims4();
    assert_eq!(ci, c, "conv2d: weight expects {ci} input channels, got {c}");
    assert_eq!(k, k2, "conv2d: only square kernels are supported");
    let ho = g.out_size(h, k);
    let wo = g.out_size(wd, k);
    let shape = [n, co, ho, wo];
    if x.is_meta() || w.is_meta() {
        return Tensor::meta(&shape);
    }
    let p = ho * wo;
    let kk = c * k * k;
    let mut out = vec![T::zero(); n * co * p];
    let mut cols = if is_pointwise(k, g) { Vec::new() } else { vec![T::zero(); kk * p] };
    for ni in 0..n {
        let xs = &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
        let os = &mut out[ni * co * p..(ni + 1) * co * p];
        if let Some(b) = b {
            for (o, &bv) in b.data().iter().enumerate() {
                os[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if is_pointwise(k, g) {
            gemm(co, kk, p, w.data(), false, xs, false, beta, os);
        } else {
            im2col(xs, c, h, wd, k, g, ho, wo, &mut cols);
            gemm(co, kk, p, w.data(), false, &cols, false, beta, os);
        }
    }
    Tensor::from_vec(&shape, out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: ConvGeom,
    need_dx: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>) {
    let (n, c, h, wd) = x.dims4();
    let (co, _, k, _) = w.dims4();
    let (_, _, ho, wo) = gout.dims4();
    let p = ho * wo;
    let kk = c * k * k;
    let pointwise = is_pointwise(k, g);
    let mut dw = vec![T::zero(); co * kk];
    let mut db = if need_db { Some(vec![T::zero(); co]) } else { None };
    let mut dx = if need_dx { Some(vec![T::zero(); n * c * h * wd]) } else { None };
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
    let mut dcols = if need_dx && !pointwise { vec![T::zero(); kk * p] } else { Vec::new() };
    for ni in 0..n {
        let xs = &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
        let gs = &gout.data()[ni * co * p..(ni + 1) * co * p];
        if let Some(db) = db.as_mut() {
            for o in 0..co {
                db[o] += gs[o * p..(o + 1) * p].iter().copied().sum::<T>();
            }
        }
        if pointwise {
            gemm(co, p, kk, gs, false, xs, true, T::one(), &mut dw);
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd];
                gemm(kk, co, p, w.data(), true, gs, false, T::zero(), dxs);
            }
        } else {
            im2col(xs, c, h, wd, k, g, ho, wo, &mut cols);
            gemm(co, p, kk, gs, false, &cols, true, T::one(), &mut dw);
            if let Some(dx) = dx.as_mut() {
                gemm(kk, co, p, w.data(), true, gs, false, T::zero(), &mut dcols);
                let dxs = &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd];
                col2im(&dcols, c, h, wd, k, g, ho, wo, dxs);
            }
        }
    }
    (
        dx.map(|d| Tensor::from_vec(x.shape(), d)),
        Tensor::from_vec(w.shape(), dw),
        db.map(|d| Tensor::from_vec(&[co], d)),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ceil_mode: bool,
}

impl PoolGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize, ceil_mode: bool) -> Self {
        Self { kernel, stride, pad, ceil_mode }
    }

    pub fn out_size(&self, input: usize) -> usize {
        let span = input + 2 * self.pad;
        assert!(span >= self.kernel || self.ceil_mode, "pooling window larger than padded input");
        let num = span.saturating_sub(self.kernel);
        let mut out = if self.ceil_mode { num.div_ceil(self.stride) + 1 } else { num / self.stride + 1 };
        // a window may not start inside the right padding
        if self.ceil_mode && (out - 1) * self.stride >= input + self.pad {
            out -= 1;
        }
        out
    }

    fn window(&self, o: usize, input: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let end = (start + self.kernel as isize).min(input as isize);
        (start.max(0) as usize, end.max(0) as usize)
    }
}

/// Max pooling; returns output and flat argmax offsets within each plane.
pub fn max_pool2d_forward<T: Scalar>(x: &Tensor<T>, g: PoolGeom) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let shape = [n, c, ho, wo];
    if x.is_meta() {
        return (Tensor::meta(&shape), Vec::new());
    }
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for oy in 0..ho {
            let (y0, y1) = g.window(oy, h);
            for ox in 0..wo {
                let (x0, x1) = g.window(ox, w);
                let mut best = T::neg_infinity();
                let mut bi = (y0 * w + x0) as u32;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let v = plane[yy * w + xx];
                        if v > best {
                            best = v;
                            bi = (yy * w + xx) as u32;
                        }
                    }
                }
                out.push(best);
                arg.push(bi);
            }
        }
    }
    (Tensor::from_vec(&shape, out), arg)
}

pub fn max_pool2d_backward<T: Scalar>(in_shape: &[usize], arg: &[u32], gout: &Tensor<T>) -> Tensor<T> {
    let plane_in = in_shape[2] * in_shape[3];
    let (_, _, ho, wo) = gout.dims4();
    let plane_out = ho * wo;
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    for (pi, (gchunk, achunk)) in gout.data().chunks(plane_out).zip(arg.chunks(plane_out)).enumerate() {
        for (&gv, &ai) in gchunk.iter().zip(achunk) {
            dxd[pi * plane_in + ai as usize] += gv;
        }
    }
    dx
}

/// Average pooling whose divisor is the number of in-bounds elements of each
/// window, so constant inputs stay constant everywhere including borders.
pub fn avg_pool2d_forward<T: Scalar>(x: &Tensor<T>, g: PoolGeom) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let shape = [n, c, ho, wo];
    if x.is_meta() {
        return Tensor::meta(&shape);
    }
    let mut out = Vec::with_capacity(n * c * ho * wo);
    // separable: row sums then column sums via a summed-area table per plane
    let mut sat = vec![T::zero(); (h + 1) * (w + 1)];
    for plane in x.data().chunks(h * w) {
        for yy in 0..h {
            let mut run = T::zero();
            for xx in 0..w {
                run += plane[yy * w + xx];
                sat[(yy + 1) * (w + 1) + xx + 1] = sat[yy * (w + 1) + xx + 1] + run;
            }
        }
        for oy in 0..ho {
            let (y0, y1) = g.window(oy, h);
            for ox in 0..wo {
                let (x0, x1) = g.window(ox, w);
                let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                    + sat[y0 * (w + 1) + x0];
                let cnt = ((y1 - y0) * (x1 - x0)).max(1);
                out.push(s / T::from_usize(cnt).unwrap());
            }
        }
    }
    Tensor::from_vec(&shape, out)
}

pub fn avg_pool2d_backward<T: Scalar>(in_shape: &[usize], g: PoolGeom, gout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (_, _, ho, wo) = gout.dims4();
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    // scatter through a 2-D difference array, then prefix-sum
    let mut diff = vec![T::zero(); (h + 1) * (w + 1)];
    for (pi, gchunk) in gout.data().chunks(ho * wo).enumerate() {
        diff.iter_mut().for_each(|v| *v = T::zero());
        for oy in 0..ho {
            let (y0, y1) = g.window(oy, h);
            for ox in 0..wo {
                let (x0, x1) = g.window(ox, w);
                let cnt = ((y1 - y0) * (x1 - x0)).max(1);
                let v = gchunk[oy * wo + ox] / T::from_usize(cnt).unwrap();
                diff[y0 * (w + 1) + x0] += v;
                diff[y0 * (w + 1) + x1] -= v;
                diff[y1 * (w + 1) + x0] -= v;
                diff[y1 * (w + 1) + x1] += v;
            }
        }
        let plane = &mut dxd[pi * h * w..(pi + 1) * h * w];
        let mut col = vec![T::zero(); w + 1];
        for yy in 0..h {
            let mut run = T::zero();
            for xx in 0..w {
                col[xx] += diff[yy * (w + 1) + xx];
                run += col[xx];
                plane[yy * w + xx] = run;
            }
        }
    }
    dx
}

#[derive(Clone, Debug)]
struct Taps<T> {
    i0: Vec<usize>,
    i1: Vec<usize>,
    l1: Vec<T>,
}

fn bilinear_taps<T: Scalar>(input: usize, output: usize) -> Taps<T> {
    let scale = input as f64 / output as f64;
    let mut taps = Taps { i0: Vec::with_capacity(output), i1: Vec::with_capacity(output), l1: Vec::with_capacity(output) };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
        taps.i0.push(i0);
        taps.i1.push(i1);
        taps.l1.push(T::c(src - i0 as f64));
    }
    taps
}

/// Bilinear resampling with half-pixel centers (`align_corners = false`).
pub fn resize_bilinear_forward<T: Scalar>(x: &Tensor<T>, ho: usize, wo: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let shape = [n, c, ho, wo];
    if x.is_meta() {
        return Tensor::meta(&shape);
    }
    if ho == h && wo == w {
        return x.clone();
    }
    let ty = bilinear_taps::<T>(h, ho);
    let tx = bilinear_taps::<T>(w, wo);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for oy in 0..ho {
            let (r0, r1, ly) = (ty.i0[oy], ty.i1[oy], ty.l1[oy]);
            let row0 = &plane[r0 * w..(r0 + 1) * w];
            let row1 = &plane[r1 * w..(r1 + 1) * w];
            for ox in 0..wo {
                let (c0, c1, lx) = (tx.i0[ox], tx.i1[ox], tx.l1[ox]);
                let top = row0[c0] + (row0[c1] - row0[c0]) * lx;
                let bot = row1[c0] + (row1[c1] - row1[c0]) * lx;
                out.push(top + (bot - top) * ly);
            }
        }
    }
    Tensor::from_vec(&shape, out)
}

pub fn resize_bilinear_backward<T: Scalar>(in_shape: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (_, _, ho, wo) = gout.dims4();
    if ho == h && wo == w {
        return gout.clone();
    }
    let ty = bilinear_taps::<T>(h, ho);
    let tx = bilinear_taps::<T>(w, wo);
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    for (pi, gchunk) in gout.data().chunks(ho * wo).enumerate() {
        let plane = &mut dxd[pi * h * w..(pi + 1) * h * w];
        for oy in 0..ho {
            let (r0, r1, ly) = (ty.i0[oy], ty.i1[oy], ty.l1[oy]);
            for ox in 0..wo {
                let (c0, c1, lx) = (tx.i0[ox], tx.i1[ox], tx.l1[ox]);
                let gv = gchunk[oy * wo + ox];
                let top = gv * (T::one() - ly);
                let bot = gv * ly;
                plane[r0 * w + c0] += top * (T::one() - lx);
                plane[r0 * w + c1] += top * lx;
                plane[r1 * w + c0] += bot * (T::one() - lx);
                plane[r1 * w + c1] += bot * lx;
            }
        }
    }
    dx
}

/// Nearest-neighbour resampling (`src = floor(dst * in / out)`), used for
/// binary masks where interpolation would break binarity.
pub fn resize_nearest<T: Scalar>(x: &Tensor<T>, ho: usize, wo: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let shape = [n, c, ho, wo];
    if x.is_meta() {
        return Tensor::meta(&shape);
    }
    let ys: Vec<usize> = (0..ho).map(|o| ((o * h) / ho).min(h - 1)).collect();
    let xs: Vec<usize> = (0..wo).map(|o| ((o * w) / wo).min(w - 1)).collect();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for &sy in &ys {
            for &sx in &xs {
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::from_vec(&shape, out)
}

/// Saved statistics of a group-norm forward pass.
#[derive(Clone, Debug)]
pub struct GroupNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: T,
) -> (Tensor<T>, Option<GroupNormCache<T>>) {
    let (n, c, h, w) = x.dims4();
    assert_eq!(c % groups, 0, "group norm: {c} channels not divisible into {groups} groups");
    if x.is_meta() {
        return (Tensor::meta(x.shape()), None);
    }
    let cg = c / groups;
    let m = cg * h * w;
    let mf = T::from_usize(m).unwrap();
    let mut out = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(n * groups);
    for ni in 0..n {
        for gi in 0..groups {
            let off = (ni * c + gi * cg) * h * w;
            let seg = &x.data()[off..off + m];
            let mean = seg.iter().copied().sum::<T>() / mf;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in seg.iter().enumerate() {
                let ch = gi * cg + j / (h * w);
                let xh = (v - mean) * is;
                xhat[off + j] = xh;
                out[off + j] = xh * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    (Tensor::from_vec(x.shape(), out), Some(GroupNormCache { xhat, inv_std }))
}

pub fn group_norm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    groups: usize,
    cache: &GroupNormCache<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let cg = c / groups;
    let hw = h * w;
    let m = cg * hw;
    let mf = T::from_usize(m).unwrap();
    let mut dx = vec![T::zero(); n * c * hw];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let g = gout.data();
    for ni in 0..n {
        for gi in 0..groups {
            let off = (ni * c + gi * cg) * hw;
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for j in 0..m {
                let ch = gi * cg + j / hw;
                let gv = g[off + j];
                let xh = cache.xhat[off + j];
                dgamma[ch] += gv * xh;
                dbeta[ch] += gv;
                let dxh = gv * gamma.data()[ch];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
            let mean_dxh = sum_dxh / mf;
            let mean_dxh_xh = sum_dxh_xh / mf;
            let is = cache.inv_std[ni * groups + gi];
            for j in 0..m {
                let ch = gi * cg + j / hw;
                let dxh = g[off + j] * gamma.data()[ch];
                dx[off + j] = is * (dxh - mean_dxh - cache.xhat[off + j] * mean_dxh_xh);
            }
        }
    }
    (
        Tensor::from_vec(shape, dx),
        Tensor::from_vec(&[c], dgamma),
        Tensor::from_vec(&[c], dbeta),
    )
}
