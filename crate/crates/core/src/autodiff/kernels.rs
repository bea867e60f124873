//! Convolution lowering (im2col / col2im) and the batched conv kernels.

use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Output size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel {kernel} larger than padded input {input}+2*{pad}");
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: conv_out_size(h, k, stride, pad),
            w_out: conv_out_size(w, k, stride, pad),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Lower one `[C, H, W]` sample to a `[C*k*k, Ho*Wo]` patch matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let hw_out = g.col_cols();
    let plane = g.h * g.w;
    for c in 0..g.c_in {
        let xc = &x[c * plane..(c + 1) * plane];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kj).min(g.w_out);
                        let hi = (g.w + g.pad).saturating_sub(kj).min(g.w_out).max(lo);
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        let start = lo + kj - g.pad;
                        drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch matrix back onto a `[C, H, W]` sample.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let hw_out = g.col_cols();
    let plane = g.h * g.w;
    for c in 0..g.c_in {
        let xc = &mut x[c * plane..(c + 1) * plane];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let srow = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    let drow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &s) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c_in, h, wd) = x.dims4();
    let (c_out, wc_in, k, k2) = w.dims4();
    assert_eq!(c_in, wc_in, "conv2d: input has {c_in} channels, weight expects {wc_in}");
    assert_eq!(k, k2, "conv2d: only square kernels are supported");
    let g = ConvGeom::new(c_in, h, wd, k, stride, pad);
    let out_plane = g.col_cols();
    let mut out = Tensor::zeros(&[n, c_out, g.h_out, g.w_out]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * out_plane] };
    let wm = MatRef::new(w.data(), c_out, g.col_rows());
    for s in 0..n {
        let xs = x.sample(s);
        let patches: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut col);
            &col
        };
        let ys = &mut out.data_mut()[s * c_out * out_plane..(s + 1) * c_out * out_plane];
        gemm(wm, MatRef::new(patches, g.col_rows(), out_plane), ys, false);
        if let Some(b) = b {
            for (co, chunk) in ys.chunks_mut(out_plane).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (n, c_in, h, wd) = x.dims4();
    let (c_out, _, k, _) = w.dims4();
    let g = ConvGeom::new(c_in, h, wd, k, stride, pad);
    let out_plane = g.col_cols();
    let rows = g.col_rows();
    let (need_x, need_w, need_b) = need;

    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * out_plane }];
    let mut dcol = vec![T::zero(); if need_x && !g.is_pointwise() { rows * out_plane } else { 0 }];

    for s in 0..n {
        let dys = &dy.data()[s * c_out * out_plane..(s + 1) * c_out * out_plane];
        if let Some(dw) = dw.as_mut() {
            let xs = x.sample(s);
            let patches: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            gemm(
                MatRef::new(dys, c_out, out_plane),
                MatRef::t(patches, rows, out_plane),
                dw.data_mut(),
                true,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let per = c_in * h * wd;
            let dxs = &mut dx.data_mut()[s * per..(s + 1) * per];
            if g.is_pointwise() {
                gemm(MatRef::t(w.data(), c_out, rows), MatRef::new(dys, c_out, out_plane), dxs, true);
            } else {
                gemm(MatRef::t(w.data(), c_out, rows), MatRef::new(dys, c_out, out_plane), &mut dcol, false);
                col2im(&dcol, &g, dxs);
            }
        }
    }
    let db = need_b.then(|| {
        let mut db = Tensor::zeros(&[c_out]);
        for s in 0..n {
            for co in 0..c_out {
                let off = (s * c_out + co) * out_plane;
                db.data_mut()[co] += dy.data()[off..off + out_plane].iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4();
        let (co, _, k, _) = w.dims4();
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(wd, k, stride, pad);
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for s in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * k + ki) * k + kj];
                                }
                            }
                        }
                        out.data_mut()[((s * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (4, 2, 1), (3, 2, 1), (1, 1, 0), (4, 1, 1), (3, 1, 0)] {
            let x = Tensor::from_fn(&[2, 3, 7, 6], |i| ((i * 37 % 11) as f64) * 0.1 - 0.5);
            let w = Tensor::from_fn(&[4, 3, k, k], |i| ((i * 13 % 7) as f64) * 0.2 - 0.6);
            let got = conv2d_forward(&x, &w, None, stride, pad);
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new(2, 5, 6, 3, 2, 1);
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; c.len()];
        im2col(&x, &g, &mut col);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 60];
        col2im(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
