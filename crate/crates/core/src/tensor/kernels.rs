//! Raw forward/backward kernels over row-major slices. The graph layer owns
//! shape validation; everything here assumes consistent inputs.

use rayon::prelude::*;

use super::{split_axis, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let ncols = g.col_cols();
    for ci in 0..g.cin {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let ncols = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T]) -> Vec<T> {
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * g.col_cols();
    let (k, n) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); g.batch * out_stride];
    out.par_chunks_mut(out_stride).enumerate().for_each(|(b, out_b)| {
        let img = &input[b * in_stride..(b + 1) * in_stride];
        if g.is_pointwise() {
            T::gemm(g.cout, k, n, weight, k as isize, 1, img, n as isize, 1, false, out_b, n as isize, 1);
        } else {
            let mut cols = vec![T::zero(); k * n];
            im2col(g, img, &mut cols);
            T::gemm(g.cout, k, n, weight, k as isize, 1, &cols, n as isize, 1, false, out_b, n as isize, 1);
        }
    });
    out
}

/// Returns `(d_input, d_weight)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * g.col_cols();
    let (k, n) = (g.col_rows(), g.col_cols());

    let per_item: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let img = &input[b * in_stride..(b + 1) * in_stride];
            let gout = &grad_out[b * out_stride..(b + 1) * out_stride];
            let pointwise = g.is_pointwise();
            let cols_owned;
            let cols: &[T] = if pointwise {
                img
            } else {
                let mut c = vec![T::zero(); k * n];
                if need_weight {
                    im2col(g, img, &mut c);
                }
                cols_owned = c;
                &cols_owned
            };
            let dw = need_weight.then(|| {
                let mut dw = vec![T::zero(); g.cout * k];
                // dW = dOut · colsᵀ
                T::gemm(g.cout, n, k, gout, n as isize, 1, cols, 1, n as isize, false, &mut dw, k as isize, 1);
                dw
            });
            let dx = need_input.then(|| {
                // dcols = Wᵀ · dOut
                let mut dcols = vec![T::zero(); k * n];
                T::gemm(k, g.cout, n, weight, 1, k as isize, gout, n as isize, 1, false, &mut dcols, n as isize, 1);
                if pointwise {
                    dcols
                } else {
                    let mut dimg = vec![T::zero(); in_stride];
                    col2im(g, &dcols, &mut dimg);
                    dimg
                }
            });
            (dx, dw)
        })
        .collect();

    let mut dx = need_input.then(|| Vec::with_capacity(g.batch * in_stride));
    let mut dw = need_weight.then(|| vec![T::zero(); g.cout * k]);
    // Fixed-order reduction keeps the result independent of thread count.
    for (ix, iw) in per_item {
        if let (Some(acc), Some(part)) = (dx.as_mut(), ix) {
            acc.extend_from_slice(&part);
        }
        if let (Some(acc), Some(part)) = (dw.as_mut(), iw) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
    }
    (dx, dw)
}

/// Per-channel statistics over all axes except 1: `(mean, biased variance)`.
pub(crate) fn channel_stats<T: Scalar>(shape: &[usize], data: &[T]) -> (Vec<T>, Vec<T>) {
    let (outer, c, inner) = split_axis(shape, 1);
    let n = T::from_usize(outer * inner).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for o in 0..outer {
            let base = (o * c + ch) * inner;
            s += data[base..base + inner].iter().copied().sum::<T>();
        }
        let m = s / n;
        let mut v = T::zero();
        for o in 0..outer {
            let base = (o * c + ch) * inner;
            for &x in &data[base..base + inner] {
                let d = x - m;
                v += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = v / n;
    }
    (mean, var)
}

pub(crate) fn softmax_forward<T: Scalar>(shape: &[usize], axis: usize, x: &[T], log: bool) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut mx = T::neg_infinity();
            for k in 0..len {
                mx = mx.max(x[idx(k)]);
            }
            let mut s = T::zero();
            for k in 0..len {
                s += (x[idx(k)] - mx).exp();
            }
            if log {
                let lse = s.ln();
                for k in 0..len {
                    out[idx(k)] = x[idx(k)] - mx - lse;
                }
            } else {
                for k in 0..len {
                    out[idx(k)] = (x[idx(k)] - mx).exp() / s;
                }
            }
        }
    }
    out
}

/// Softmax of a plain tensor along `axis`, outside any graph.
pub fn softmax_value<T: Scalar>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    Tensor::from_parts(t.shape().to_vec(), softmax_forward(t.shape(), axis, t.data(), false))
}

/// Bilinear corner lookup for one normalized coordinate along an axis of
/// length `len`: `(low index, high index, fraction, d fraction / d coord)`.
#[inline]
fn axis_weights<T: Scalar>(coord: T, len: usize) -> (usize, usize, T, T) {
    let n = T::from_usize(len).unwrap();
    let half = T::from_f64_lossy(0.5);
    let pix = coord * n - half;
    let hi_lim = T::from_usize(len - 1).unwrap();
    if len == 1 {
        return (0, 0, T::zero(), T::zero());
    }
    let (p, slope) = if pix < T::zero() {
        (T::zero(), T::zero())
    } else if pix > hi_lim {
        (hi_lim, T::zero())
    } else {
        (pix, n)
    };
    let lo = p.floor().to_usize().unwrap().min(len - 2);
    let frac = p - T::from_usize(lo).unwrap();
    (lo, lo + 1, frac, slope)
}

pub(crate) struct SampleGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn grid_sample_forward<T: Scalar>(g: &SampleGeom, field: &[T], coords: &[T]) -> Vec<T> {
    let npts = g.ho * g.wo;
    let plane = g.h * g.w;
    let mut out = vec![T::zero(); g.batch * g.channels * npts];
    for b in 0..g.batch {
        for q in 0..npts {
            let cx = coords[(b * npts + q) * 2];
            let cy = coords[(b * npts + q) * 2 + 1];
            let (x0, x1, fx, _) = axis_weights(cx, g.w);
            let (y0, y1, fy, _) = axis_weights(cy, g.h);
            let one = T::one();
            let w00 = (one - fy) * (one - fx);
            let w01 = (one - fy) * fx;
            let w10 = fy * (one - fx);
            let w11 = fy * fx;
            for c in 0..g.channels {
                let f = &field[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                out[(b * g.channels + c) * npts + q] = w00 * f[y0 * g.w + x0]
                    + w01 * f[y0 * g.w + x1]
                    + w10 * f[y1 * g.w + x0]
                    + w11 * f[y1 * g.w + x1];
            }
        }
    }
    out
}

/// Returns `(d_field, d_coords)`.
pub(crate) fn grid_sample_backward<T: Scalar>(
    g: &SampleGeom,
    field: &[T],
    coords: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let npts = g.ho * g.wo;
    let plane = g.h * g.w;
    let mut dfield = vec![T::zero(); field.len()];
    let mut dcoords = vec![T::zero(); coords.len()];
    let one = T::one();
    for b in 0..g.batch {
        for q in 0..npts {
            let cx = coords[(b * npts + q) * 2];
            let cy = coords[(b * npts + q) * 2 + 1];
            let (x0, x1, fx, sx) = axis_weights(cx, g.w);
            let (y0, y1, fy, sy) = axis_weights(cy, g.h);
            let mut gx = T::zero();
            let mut gy = T::zero();
            for c in 0..g.channels {
                let base = (b * g.channels + c) * plane;
                let go = grad_out[(b * g.channels + c) * npts + q];
                let f = &field[base..base + plane];
                let (v00, v01) = (f[y0 * g.w + x0], f[y0 * g.w + x1]);
                let (v10, v11) = (f[y1 * g.w + x0], f[y1 * g.w + x1]);
                let df = &mut dfield[base..base + plane];
                df[y0 * g.w + x0] += go * (one - fy) * (one - fx);
                df[y0 * g.w + x1] += go * (one - fy) * fx;
                df[y1 * g.w + x0] += go * fy * (one - fx);
                df[y1 * g.w + x1] += go * fy * fx;
                gx += go * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                gy += go * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
            }
            dcoords[(b * npts + q) * 2] = gx * sx;
            dcoords[(b * npts + q) * 2 + 1] = gy * sy;
        }
    }
    (dfield, dcoords)
}

/// Bilinear sampling of a plain `[B,C,H,W]` field at `[B,Ho,Wo,2]` coordinates.
pub fn grid_sample_value<T: Scalar>(field: &Tensor<T>, coords: &Tensor<T>) -> Tensor<T> {
    let (fs, cs) = (field.shape(), coords.shape());
    assert!(fs.len() == 4 && cs.len() == 4 && cs[3] == 2 && cs[0] == fs[0]);
    let g = SampleGeom { batch: fs[0], channels: fs[1], h: fs[2], w: fs[3], ho: cs[1], wo: cs[2] };
    let out = grid_sample_forward(&g, field.data(), coords.data());
    Tensor::from_parts(vec![fs[0], fs[1], cs[1], cs[2]], out)
}

/// Permutes axes of a row-major buffer.
pub(crate) fn permute<T: Scalar>(shape: &[usize], perm: &[usize], x: &[T]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}
