//! Differentiable operations on [`Var`]s.

use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use super::kernels::{conv2d_backward, conv2d_forward};
use super::{Tape, Var};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

fn same_tape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(std::ptr::eq(a.tape, b.tape), "vars belong to different tapes");
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(
        self,
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var<'t, T> {
        self.tape.push_op(value, &[self], Box::new(move |g, _| vec![Some(backward(g))]))
    }

    /// Element-wise map with derivative `df(x, y)` expressed through the input
    /// and the output.
    fn elementwise(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = Arc::new(y.clone());
        self.unary(y, move |g| {
            let mut out = Tensor::zeros(g.shape());
            for (((o, &gi), &xi), &yi) in
                out.data_mut().iter_mut().zip(g.data()).zip(x.data()).zip(y_saved.data())
            {
                *o = gi * df(xi, yi);
            }
            out
        })
    }

    fn add_var(self, other: Var<'t, T>) -> Var<'t, T> {
        same_tape(&self, &other);
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, |x, y| x + y);
        self.tape.push_op(y, &[self, other], Box::new(|g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        }))
    }

    fn sub_var(self, other: Var<'t, T>) -> Var<'t, T> {
        same_tape(&self, &other);
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, |x, y| x - y);
        self.tape.push_op(y, &[self, other], Box::new(|g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v))]
        }))
    }

    fn mul_var(self, other: Var<'t, T>) -> Var<'t, T> {
        same_tape(&self, &other);
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, |x, y| x * y);
        self.tape.push_op(y, &[self, other], Box::new(move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, b| g * b)),
                need[1].then(|| g.zip_map(&a, |g, a| g * a)),
            ]
        }))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let y = self.value().map(|x| x * c);
        self.unary(y, move |g| g.map(|v| v * c))
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let y = self.value().map(|x| x + c);
        self.unary(y, |g| g.clone())
    }

    pub fn leaky_relu(self, slope: T) -> Var<'t, T> {
        self.elementwise(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn relu(self) -> Var<'t, T> {
        self.elementwise(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.elementwise(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn abs(self) -> Var<'t, T> {
        self.elementwise(|x| x.abs(), |x, _| x.signum() * if x == T::zero() { T::zero() } else { T::one() })
    }

    pub fn square(self) -> Var<'t, T> {
        self.elementwise(|x| x * x, |x, _| x + x)
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(&shape, g.data()[0]))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = Tensor::new(shape, x.data().to_vec());
        self.unary(y, move |g| Tensor::new(&old, g.data().to_vec()))
    }

    /// 2-D convolution with square kernel `w: [C_out, C_in, k, k]`.
    pub fn conv2d(self, w: Var<'t, T>, b: Option<Var<'t, T>>, stride: usize, pad: usize) -> Var<'t, T> {
        same_tape(&self, &w);
        let x = self.value();
        let wv = w.value();
        let bv = b.map(|b| b.value());
        let y = conv2d_forward(&x, &wv, bv.as_deref(), stride, pad);
        let mut parents = vec![self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.tape.push_op(y, &parents, Box::new(move |g, need| {
            let need_b = has_bias && need[2];
            let grads = conv2d_backward(g, &x, &wv, stride, pad, (need[0], need[1], need_b));
            let mut out = vec![grads.dx, grads.dw];
            if has_bias {
                out.push(grads.db);
            }
            out
        }))
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` -> `[N, out]`.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Var<'t, T> {
        let x = self.value();
        let wv = w.value();
        let (n, d_in) = x.dims2();
        let (d_out, w_in) = wv.dims2();
        assert_eq!(d_in, w_in, "linear: input width {d_in} != weight width {w_in}");
        let mut y = Tensor::zeros(&[n, d_out]);
        gemm(MatRef::new(x.data(), n, d_in), MatRef::t(wv.data(), d_out, d_in), y.data_mut(), false);
        if let Some(b) = b {
            let bv = b.value();
            for row in y.data_mut().chunks_mut(d_out) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let mut parents = vec![self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.tape.push_op(y, &parents, Box::new(move |g, need| {
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(&[n, d_in]);
                gemm(MatRef::new(g.data(), n, d_out), MatRef::new(wv.data(), d_out, d_in), dx.data_mut(), false);
                dx
            });
            let dw = need[1].then(|| {
                let mut dw = Tensor::zeros(&[d_out, d_in]);
                gemm(MatRef::t(g.data(), n, d_out), MatRef::new(x.data(), n, d_in), dw.data_mut(), false);
                dw
            });
            let mut out = vec![dx, dw];
            if has_bias {
                out.push(need[2].then(|| {
                    let mut db = Tensor::zeros(&[d_out]);
                    for row in g.data().chunks(d_out) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    db
                }));
            }
            out
        }))
    }

    /// Per-(sample, channel) normalization over spatial positions:
    /// `(x - mean) / sqrt(var + eps)` with the population variance.
    pub fn instance_norm(self, eps: T) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let inv_plane = T::one() / T::of(plane as f64);
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); n * c];
        for (i, (xs, ys)) in x.data().chunks(plane).zip(y.data_mut().chunks_mut(plane)).enumerate() {
            let mean = xs.iter().copied().sum::<T>() * inv_plane;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_plane;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for (o, &v) in ys.iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
        }
        let xhat = Arc::new(y.clone());
        self.unary(y, move |g| {
            let mut dx = Tensor::zeros(g.shape());
            for (i, ((gs, xh), dxs)) in g
                .data()
                .chunks(plane)
                .zip(xhat.data().chunks(plane))
                .zip(dx.data_mut().chunks_mut(plane))
                .enumerate()
            {
                let mean_g = gs.iter().copied().sum::<T>() * inv_plane;
                let mean_gx = gs.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_plane;
                let is = inv_std[i];
                for ((d, &gv), &xv) in dxs.iter_mut().zip(gs).zip(xh) {
                    *d = is * (gv - mean_g - xv * mean_gx);
                }
            }
            dx
        })
    }

    /// `y[n, c, :, :] = gamma[n, c] * x[n, c, :, :] + beta[n, c]`.
    pub fn channel_affine(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(gv.shape(), &[n, c], "channel_affine: gamma must be [N, C]");
        assert_eq!(bv.shape(), &[n, c], "channel_affine: beta must be [N, C]");
        let plane = h * w;
        let mut y = Tensor::zeros(x.shape());
        for (i, (xs, ys)) in x.data().chunks(plane).zip(y.data_mut().chunks_mut(plane)).enumerate() {
            let (gg, bb) = (gv.data()[i], bv.data()[i]);
            for (o, &v) in ys.iter_mut().zip(xs) {
                *o = gg * v + bb;
            }
        }
        self.tape.push_op(y, &[self, gamma, beta], Box::new(move |g, need| {
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(g.shape());
                for (i, (gs, ds)) in g.data().chunks(plane).zip(dx.data_mut().chunks_mut(plane)).enumerate() {
                    let gg = gv.data()[i];
                    for (d, &v) in ds.iter_mut().zip(gs) {
                        *d = gg * v;
                    }
                }
                dx
            });
            let dgamma = need[1].then(|| {
                Tensor::new(
                    &[n, c],
                    g.data()
                        .chunks(plane)
                        .zip(x.data().chunks(plane))
                        .map(|(gs, xs)| gs.iter().zip(xs).map(|(&a, &b)| a * b).sum())
                        .collect(),
                )
            });
            let dbeta =
                need[2].then(|| Tensor::new(&[n, c], g.data().chunks(plane).map(|gs| gs.iter().copied().sum()).collect()));
            vec![dx, dgamma, dbeta]
        }))
    }

    /// Columns `[start, start + len)` of a `[N, D]` tensor.
    pub fn narrow_cols(self, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        let (n, d) = x.dims2();
        assert!(start + len <= d);
        let y = Tensor::new(
            &[n, len],
            x.data().chunks(d).flat_map(|row| row[start..start + len].iter().copied()).collect(),
        );
        self.unary(y, move |g| {
            let mut dx = Tensor::zeros(&[n, d]);
            for (row, gr) in dx.data_mut().chunks_mut(d).zip(g.data().chunks(len)) {
                row[start..start + len].copy_from_slice(gr);
            }
            dx
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = (h * factor, w * factor);
        let mut y = Tensor::zeros(&[n, c, ho, wo]);
        for (xs, ys) in x.data().chunks(h * w).zip(y.data_mut().chunks_mut(ho * wo)) {
            for oy in 0..ho {
                let src = &xs[(oy / factor) * w..(oy / factor + 1) * w];
                for (ox, o) in ys[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                    *o = src[ox / factor];
                }
            }
        }
        self.unary(y, move |g| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for (gs, ds) in g.data().chunks(ho * wo).zip(dx.data_mut().chunks_mut(h * w)) {
                for oy in 0..ho {
                    for ox in 0..wo {
                        ds[(oy / factor) * w + ox / factor] += gs[oy * wo + ox];
                    }
                }
            }
            dx
        })
    }

    /// 2x2 average pooling with stride 2 (H and W must be even).
    pub fn avg_pool2(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let mut y = Tensor::zeros(&[n, c, ho, wo]);
        for (xs, ys) in x.data().chunks(h * w).zip(y.data_mut().chunks_mut(ho * wo)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = 2 * oy * w + 2 * ox;
                    ys[oy * wo + ox] = (xs[i] + xs[i + 1] + xs[i + w] + xs[i + w + 1]) * quarter;
                }
            }
        }
        self.unary(y, move |g| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for (gs, ds) in g.data().chunks(ho * wo).zip(dx.data_mut().chunks_mut(h * w)) {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let v = gs[oy * wo + ox] * quarter;
                        let i = 2 * oy * w + 2 * ox;
                        ds[i] = v;
                        ds[i + 1] = v;
                        ds[i + w] = v;
                        ds[i + w + 1] = v;
                    }
                }
            }
            dx
        })
    }

    /// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let inv = T::one() / T::of(plane as f64);
        let y = Tensor::new(&[n, c], x.data().chunks(plane).map(|s| s.iter().copied().sum::<T>() * inv).collect());
        self.unary(y, move |g| {
            Tensor::new(&[n, c, h, w], g.data().iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect())
        })
    }

    /// Element-wise maximum over consecutive groups of `k` rows:
    /// `[N*k, D] -> [N, D]`. Gradient goes to the first maximal entry.
    pub fn group_max(self, k: usize) -> Var<'t, T> {
        let x = self.value();
        let (rows, d) = x.dims2();
        assert!(k >= 1 && rows % k == 0, "group_max: {rows} rows not divisible by k={k}");
        let n = rows / k;
        let mut y = Tensor::zeros(&[n, d]);
        let mut arg = vec![0usize; n * d];
        for s in 0..n {
            for j in 0..d {
                let mut best = x.data()[(s * k) * d + j];
                let mut bi = 0;
                for r in 1..k {
                    let v = x.data()[(s * k + r) * d + j];
                    if v > best {
                        best = v;
                        bi = r;
                    }
                }
                y.data_mut()[s * d + j] = best;
                arg[s * d + j] = bi;
            }
        }
        self.unary(y, move |g| {
            let mut dx = Tensor::zeros(&[rows, d]);
            for s in 0..n {
                for j in 0..d {
                    dx.data_mut()[(s * k + arg[s * d + j]) * d + j] = g.data()[s * d + j];
                }
            }
            dx
        })
    }

    /// Per-sample channel Gram matrix `F F^T / (C*H*W)`: `[N, C, H, W] -> [N, C, C]`.
    pub fn gram(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let norm = T::one() / T::of((c * hw) as f64);
        let mut y = Tensor::zeros(&[n, c, c]);
        for s in 0..n {
            let f = x.sample(s);
            let gs = &mut y.data_mut()[s * c * c..(s + 1) * c * c];
            gemm(MatRef::new(f, c, hw), MatRef::t(f, c, hw), gs, false);
            gs.iter_mut().for_each(|v| *v *= norm);
        }
        self.unary(y, move |g| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            let mut sym = vec![T::zero(); c * c];
            for s in 0..n {
                let gs = &g.data()[s * c * c..(s + 1) * c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = (gs[i * c + j] + gs[j * c + i]) * norm;
                    }
                }
                let per = c * hw;
                gemm(
                    MatRef::new(&sym, c, c),
                    MatRef::new(x.sample(s), c, hw),
                    &mut dx.data_mut()[s * per..(s + 1) * per],
                    false,
                );
            }
            dx
        })
    }

    /// Euclidean norm of each row: `[N, D] -> [N]`. The gradient at a zero
    /// row is taken as zero.
    pub fn row_norm(self) -> Var<'t, T> {
        let x = self.value();
        let (n, d) = x.dims2();
        let norms: Vec<T> = x.data().chunks(d).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        let y = Tensor::new(&[n], norms.clone());
        self.unary(y, move |g| {
            let mut dx = Tensor::zeros(&[n, d]);
            for (s, (row, xr)) in dx.data_mut().chunks_mut(d).zip(x.data().chunks(d)).enumerate() {
                if norms[s] > T::zero() {
                    let f = g.data()[s] / norms[s];
                    for (o, &v) in row.iter_mut().zip(xr) {
                        *o = f * v;
                    }
                }
            }
            dx
        })
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].dims4();
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vn, vc, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat_channels: mismatched shapes");
                vc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut y = Tensor::zeros(&[n, total, h, w]);
        for s in 0..n {
            let mut off = (s * total) * plane;
            for (v, &c) in values.iter().zip(&chans) {
                let src = v.sample(s);
                y.data_mut()[off..off + c * plane].copy_from_slice(src);
                off += c * plane;
            }
        }
        parts[0].tape.push_op(y, parts, Box::new(move |g, need| {
            let mut outs = Vec::with_capacity(chans.len());
            let mut c_off = 0;
            for (i, &c) in chans.iter().enumerate() {
                if need[i] {
                    let mut d = Tensor::zeros(&[n, c, h, w]);
                    for s in 0..n {
                        let src = &g.data()[(s * total + c_off) * plane..(s * total + c_off + c) * plane];
                        d.data_mut()[s * c * plane..(s + 1) * c * plane].copy_from_slice(src);
                    }
                    outs.push(Some(d));
                } else {
                    outs.push(None);
                }
                c_off += c;
            }
            outs
        }))
    }

    /// Concatenate along the leading (batch) axis.
    pub fn concat_batch(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let y = Tensor::concat_batch(&refs);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        parts[0].tape.push_op(y, parts, Box::new(move |g, need| {
            let mut start = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(i, &len)| {
                    let out = need[i].then(|| g.narrow_batch(start, len));
                    start += len;
                    out
                })
                .collect()
        }))
    }

    /// Samples `[start, start + len)` along the leading axis.
    pub fn narrow_batch(self, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        let full = x.shape().to_vec();
        let y = x.narrow_batch(start, len);
        self.unary(y, move |g| {
            let mut dx = Tensor::zeros(&full);
            let per = g.numel() / len.max(1);
            dx.data_mut()[start * per..(start + len) * per].copy_from_slice(g.data());
            dx
        })
    }

    /// Divide a weight by its spectral norm estimate `sigma = u^T W v`, where
    /// `W` is the weight reshaped to `[rows, numel / rows]` and `u`, `v` are
    /// held constant.
    pub fn spectral_normalize(self, u: &Tensor<T>, v: &Tensor<T>) -> Var<'t, T> {
        let w = self.value();
        let rows = w.shape()[0];
        let cols = w.numel() / rows;
        assert_eq!(u.numel(), rows);
        assert_eq!(v.numel(), cols);
        let mut wv = vec![T::zero(); rows];
        gemm(MatRef::new(w.data(), rows, cols), MatRef::new(v.data(), cols, 1), &mut wv, false);
        let sigma_raw: T = u.data().iter().zip(&wv).map(|(&a, &b)| a * b).sum();
        let tiny = T::of(1e-12);
        let sigma = if sigma_raw.abs() < tiny { tiny } else { sigma_raw };
        let inv = T::one() / sigma;
        let y = w.map(|x| x * inv);
        let (u, v) = (u.clone(), v.clone());
        self.unary(y, move |g| {
            // d(W/s) = G/s - (<G, W>/s^2) u v^T
            let gw: T = g.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
            let coef = gw * inv * inv;
            let mut dw = g.map(|x| x * inv);
            for (r, row) in dw.data_mut().chunks_mut(cols).enumerate() {
                let ur = u.data()[r] * coef;
                for (d, &vc) in row.iter_mut().zip(v.data()) {
                    *d -= ur * vc;
                }
            }
            dw
        })
    }

    /// Mean pixel-wise softmax cross-entropy of logits `[N, C, H, W]` against
    /// integer targets laid out as `[N, H, W]`.
    pub fn cross_entropy(self, targets: &[u8]) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        assert_eq!(targets.len(), n * plane);
        assert!(targets.iter().all(|&t| (t as usize) < c), "cross_entropy: target class out of range");
        let count = T::of((n * plane) as f64);
        let mut probs = vec![T::zero(); n * c * plane];
        let mut loss = T::zero();
        for s in 0..n {
            let xs = x.sample(s);
            for p in 0..plane {
                let mut m = T::neg_infinity();
                for ch in 0..c {
                    m = m.max(xs[ch * plane + p]);
                }
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (xs[ch * plane + p] - m).exp();
                    probs[(s * c + ch) * plane + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    probs[(s * c + ch) * plane + p] /= z;
                }
                let t = targets[s * plane + p] as usize;
                loss += -(xs[t * plane + p] - m - z.ln());
            }
        }
        let targets = targets.to_vec();
        self.unary(Tensor::scalar(loss / count), move |g| {
            let scale = g.data()[0] / count;
            let mut dx = Tensor::new(&[n, c, h, w], probs.clone());
            for s in 0..n {
                for p in 0..plane {
                    let t = targets[s * plane + p] as usize;
                    dx.data_mut()[(s * c + t) * plane + p] -= T::one();
                }
            }
            dx.data_mut().iter_mut().for_each(|v| *v *= scale);
            dx
        })
    }
}

impl<'t, T: Scalar> Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        self.add_var(rhs)
    }
}

impl<'t, T: Scalar> Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.sub_var(rhs)
    }
}

impl<'t, T: Scalar> Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.mul_var(rhs)
    }
}

impl<'t, T: Scalar> Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self::Output {
        self.scale(-T::one())
    }
}

impl<T: Scalar> Tape<T> {
    /// Weighted sum of scalar vars, accumulated left to right.
    pub fn weighted_sum<'t>(&'t self, terms: &[(Var<'t, T>, T)]) -> Var<'t, T> {
        assert!(!terms.is_empty());
        let mut acc = terms[0].0.scale(terms[0].1);
        for &(v, w) in &terms[1..] {
            acc = acc + v.scale(w);
        }
        acc
    }
}
