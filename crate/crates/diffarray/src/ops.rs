//! Differentiable operations recorded on a [`Graph`].

use crate::error::{ArrayError, Result};
use crate::graph::{permute_index_map, Graph, Op, PatchGeometry, Var};
use crate::kernels::{gemm_nn, gemm_nt, softmax_rows};
use crate::real::Real;
use crate::tensor::Tensor;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> ArrayError {
    ArrayError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.push(Tensor::new(av.shape().to_vec(), data)?, op, &[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[..., n] + bias[n]`
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let width = bv.numel();
        if xv.last_dim() != width || bv.rank() != 1 {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(width) {
            row.iter_mut().zip(bv.data()).for_each(|(a, b)| *a += *b);
        }
        Ok(self.push(
            Tensor::new(xv.shape().to_vec(), data)?,
            Op::AddBias { x, bias },
            &[x, bias],
        ))
    }

    /// `x[B, ..., C] + y[B, C]`, broadcasting `y` over the middle axes.
    pub fn add_per_batch(&self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        if yv.rank() != 2 || xv.rank() < 2 || xv.shape()[0] != yv.shape()[0] || xv.last_dim() != yv.shape()[1] {
            return Err(shape_err("add_per_batch", xv.shape(), yv.shape()));
        }
        let (batch, width) = (yv.shape()[0], yv.shape()[1]);
        let rows = xv.numel() / (batch * width);
        let mut data = xv.data().to_vec();
        for b in 0..batch {
            let yrow = &yv.data()[b * width..(b + 1) * width];
            for r in 0..rows {
                let off = (b * rows + r) * width;
                data[off..off + width]
                    .iter_mut()
                    .zip(yrow)
                    .for_each(|(a, c)| *a += *c);
            }
        }
        Ok(self.push(
            Tensor::new(xv.shape().to_vec(), data)?,
            Op::AddPerBatch {
                x,
                y,
                batch,
                rows,
                width,
            },
            &[x, y],
        ))
    }

    pub fn scale(&self, x: Var, factor: f64) -> Var {
        let factor = T::of(factor);
        let xv = self.value(x);
        self.push(xv.map(|v| v * factor), Op::Scale { x, factor }, &[x])
    }

    pub fn abs(&self, x: Var) -> Var {
        let xv = self.value(x);
        self.push(xv.map(|v| v.abs()), Op::Abs(x), &[x])
    }

    pub fn square(&self, x: Var) -> Var {
        let xv = self.value(x);
        self.push(xv.map(|v| v * v), Op::Square(x), &[x])
    }

    pub fn relu(&self, x: Var) -> Var {
        let xv = self.value(x);
        self.push(xv.map(|v| v.max(T::zero())), Op::Relu(x), &[x])
    }

    pub fn silu(&self, x: Var) -> Var {
        let xv = self.value(x);
        self.push(
            xv.map(|v| v / (T::one() + (-v).exp())),
            Op::Silu(x),
            &[x],
        )
    }

    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        self.push(Tensor::scalar(xv.sum()), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.numel() as f64);
        self.push(Tensor::scalar(xv.sum() / n), Op::Mean(x), &[x])
    }

    /// `a[..., k] · b[k, p] → [..., p]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 2 || bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (k, n) = (bv.shape()[0], bv.shape()[1]);
        let m = av.numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 2") = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// `a[..., k] · b[p, k]ᵀ → [..., p]`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 2 || bv.rank() != 2 || av.last_dim() != bv.shape()[1] {
            return Err(shape_err("matmul_nt", av.shape(), bv.shape()));
        }
        let (n, k) = (bv.shape()[0], bv.shape()[1]);
        let m = av.numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 2") = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatmulNt { a, b, m, k, n }, &[a, b]))
    }

    /// Batched `a[B, m, k] · b[B, k, n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] || av.shape()[2] != bv.shape()[1] {
            return Err(shape_err("bmm", av.shape(), bv.shape()));
        }
        let (batch, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm_nn(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(
            Tensor::new([batch, m, n], out)?,
            Op::Bmm { a, b, batch, m, k, n },
            &[a, b],
        ))
    }

    /// Batched `a[B, m, k] · b[B, n, k]ᵀ`.
    pub fn bmm_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] || av.shape()[2] != bv.shape()[2] {
            return Err(shape_err("bmm_nt", av.shape(), bv.shape()));
        }
        let (batch, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[1]);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm_nt(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(
            Tensor::new([batch, m, n], out)?,
            Op::BmmNt { a, b, batch, m, k, n },
            &[a, b],
        ))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(ArrayError::Config(format!(
                "softmax axis {axis} out of range for rank {}",
                xv.rank()
            )));
        }
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(ArrayError::Numeric {
                op: "softmax",
                detail: "NaN input".into(),
            });
        }
        let shape = xv.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = if inner == 1 {
            let mut data = xv.data().to_vec();
            softmax_rows(&mut data, len);
            data
        } else {
            let mut data = vec![T::zero(); xv.numel()];
            let mut buf = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    for a in 0..len {
                        buf[a] = xv.data()[base + a * inner];
                    }
                    softmax_rows(&mut buf, len);
                    for a in 0..len {
                        data[base + a * inner] = buf[a];
                    }
                }
            }
            data
        };
        Ok(self.push(
            Tensor::new(shape.to_vec(), out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Normalizes each row of the trailing axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let width = xv.last_dim();
        if width < 2 {
            return Err(ArrayError::Config("layer_norm needs a normalized extent >= 2".into()));
        }
        if gv.numel() != width || bv.numel() != width {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let eps = T::of(eps);
        let inv_w = T::one() / T::of(width as f64);
        let rows = xv.numel() / width;
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * width..(r + 1) * width];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_w;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_w;
            let s = T::one() / (var + eps).sqrt();
            inv_std[r] = s;
            for j in 0..width {
                let h = (row[j] - mean) * s;
                xhat[r * width + j] = h;
                out[r * width + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.push(
            Tensor::new(xv.shape().to_vec(), out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                width,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Scaled dot-product attention over `heads` slices of the model axis.
    ///
    /// `q` is `[Bq, Lq, D]`, `k` and `v` are `[Bk, Lk, D]` with `Bq = Bk * group`:
    /// query batch `b` attends to key batch `b / group`. Each head uses
    /// `1/sqrt(D / heads)` scaling. Returns the concatenated head outputs and the
    /// post-softmax weights averaged over heads, `[Bq, Lq, Lk]`.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        group: usize,
    ) -> Result<(Var, Tensor<T>)> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.rank() != 3 || kv.rank() != 3 || kv.shape() != vv.shape() {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        let (bq, lq, dim) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let (bk, lk) = (kv.shape()[0], kv.shape()[1]);
        if kv.shape()[2] != dim || group == 0 || bk * group != bq {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(ArrayError::Config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        let dh = dim / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); bq * heads * lq * lk];
        let mut out = vec![T::zero(); bq * lq * dim];
        let mut avg = vec![T::zero(); bq * lq * lk];
        let inv_heads = T::one() / T::of(heads as f64);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..bq {
            let kb = b / group;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qrow = (b * lq + i) * dim + off;
                    let prow = ((b * heads + h) * lq + i) * lk;
                    let p = &mut probs[prow..prow + lk];
                    for j in 0..lk {
                        let krow = (kb * lk + j) * dim + off;
                        let mut acc = T::zero();
                        for c in 0..dh {
                            acc += qd[qrow + c] * kd[krow + c];
                        }
                        p[j] = acc * scale;
                    }
                    softmax_rows(p, lk);
                    let o = &mut out[qrow..qrow + dh];
                    for j in 0..lk {
                        let vrow = (kb * lk + j) * dim + off;
                        let pj = p[j];
                        for c in 0..dh {
                            o[c] += pj * vd[vrow + c];
                        }
                        avg[(b * lq + i) * lk + j] += pj * inv_heads;
                    }
                }
            }
        }
        let weights = Tensor::new([bq, lq, lk], avg)?;
        let var = self.push(
            Tensor::new([bq, lq, dim], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                group,
                lq,
                lk,
                dim,
                probs,
            },
            &[q, k, v],
        );
        Ok((var, weights))
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let t = (*xv).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(ArrayError::Config(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let map = permute_index_map(xv.shape(), perm);
        let data = map.iter().map(|&i| xv.data()[i]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| xv.shape()[p]).collect();
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Permute {
                x,
                in_shape: xv.shape().to_vec(),
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Same-padded patches of an NHWC array: `[B, H, W, C] → [B, H·W, C·kh·kw]`.
    pub fn im2col(&self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err("im2col", xv.shape(), &[kh, kw]));
        }
        let s = xv.shape();
        let geom = PatchGeometry {
            batch: s[0],
            h: s[1],
            w: s[2],
            c: s[3],
            kh,
            kw,
        };
        let mut out = vec![T::zero(); geom.batch * geom.h * geom.w * geom.cols()];
        geom.for_each(|o, i| out[o] = xv.data()[i]);
        Ok(self.push(
            Tensor::new([geom.batch, geom.h * geom.w, geom.cols()], out)?,
            Op::Im2col { x, geom },
            &[x],
        ))
    }

    /// Same-padded 2D cross-correlation on NHWC input with `[C_out, C_in, k, k]` weights.
    pub fn conv2d_nhwc(&self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[3] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        let cols = self.im2col(x, k, k)?;
        let wm = self.reshape(w, [cout, cin * k * k])?;
        let y = self.matmul_nt(cols, wm)?;
        self.reshape(y, [xs[0], xs[1], xs[2], cout])
    }

    /// Same-padded cross-correlation of a `[C_in, H, W]` image with `[C_out, C_in, k, k]` weights.
    pub fn conv2d(&self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let hwc = self.permute(x, &[1, 2, 0])?;
        let nhwc = self.reshape(hwc, [1, xs[1], xs[2], xs[0]])?;
        let y = self.conv2d_nhwc(nhwc, w)?;
        let y = self.reshape(y, [xs[1], xs[2], ws[0]])?;
        self.permute(y, &[2, 0, 1])
    }

    /// Same-padded temporal convolution: `[B, T, C_in]` with `[C_out, C_in, k]` weights.
    pub fn conv1d(&self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] || ws[2] % 2 == 0 {
            return Err(shape_err("conv1d", &xs, &ws));
        }
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        let x4 = self.reshape(x, [xs[0], 1, xs[1], xs[2]])?;
        let cols = self.im2col(x4, 1, k)?;
        let wm = self.reshape(w, [cout, cin * k])?;
        let y = self.matmul_nt(cols, wm)?;
        self.reshape(y, [xs[0], xs[1], cout])
    }

    /// Style-modulated, demodulated weights.
    ///
    /// `w` is `[C_out, C_in, taps]`, `phi` is `[B, C_in]`. Output `[B, C_out, C_in·taps]` holds
    /// `φ_i·ω_jik / sqrt(Σ_{i,k} (φ_i·ω_jik)² + eps)` per sample.
    pub fn demodulate(&self, w: Var, phi: Var, eps: f64) -> Result<Var> {
        let (wv, pv) = (self.value(w), self.value(phi));
        if eps <= 0.0 {
            return Err(ArrayError::Config(format!("demodulation epsilon must be positive, got {eps}")));
        }
        if wv.rank() < 2 || pv.rank() != 2 || pv.shape()[1] != wv.shape()[1] {
            return Err(shape_err("demodulate", wv.shape(), pv.shape()));
        }
        let (cout, cin) = (wv.shape()[0], wv.shape()[1]);
        let taps = wv.numel() / (cout * cin);
        let batch = pv.shape()[0];
        let per = cin * taps;
        let eps = T::of(eps);
        let mut out = vec![T::zero(); batch * cout * per];
        let mut inv_norm = vec![T::zero(); batch * cout];
        for b in 0..batch {
            for j in 0..cout {
                let base = (b * cout + j) * per;
                let mut ss = T::zero();
                for i in 0..cin {
                    let p = pv.data()[b * cin + i];
                    for t in 0..taps {
                        let u = p * wv.data()[j * per + i * taps + t];
                        out[base + i * taps + t] = u;
                        ss += u * u;
                    }
                }
                let s = T::one() / (ss + eps).sqrt();
                inv_norm[b * cout + j] = s;
                out[base..base + per].iter_mut().for_each(|u| *u *= s);
            }
        }
        Ok(self.push(
            Tensor::new([batch, cout, per], out)?,
            Op::Demodulate {
                w,
                phi,
                batch,
                cout,
                cin,
                taps,
                inv_norm,
            },
            &[w, phi],
        ))
    }

    /// Modulated convolution on NHWC input with per-sample scales `phi[B, C_in]`.
    pub fn modulated_conv2d_nhwc(&self, x: Var, w: Var, phi: Var, eps: f64) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[3] || ws[2] != ws[3] {
            return Err(shape_err("modulated_conv2d", &xs, &ws));
        }
        let (batch, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let wmod = self.demodulate(w, phi, eps)?;
        let cols = self.im2col(x, k, k)?;
        let y = self.bmm_nt(cols, wmod)?;
        self.reshape(y, [batch, h, wd, cout])
    }

    /// Single-image modulated convolution: `[C_in, H, W]`, `phi[C_in]`.
    pub fn modulated_conv2d(&self, x: Var, w: Var, phi: Var, eps: f64) -> Result<Var> {
        let (xs, ps) = (self.shape(x), self.shape(phi));
        if xs.len() != 3 || ps != [xs[0]] {
            return Err(shape_err("modulated_conv2d", &xs, &ps));
        }
        let phi2 = self.reshape(phi, [1, xs[0]])?;
        let hwc = self.permute(x, &[1, 2, 0])?;
        let nhwc = self.reshape(hwc, [1, xs[1], xs[2], xs[0]])?;
        let y = self.modulated_conv2d_nhwc(nhwc, w, phi2, eps)?;
        let cout = self.shape(w)[0];
        let y = self.reshape(y, [xs[1], xs[2], cout])?;
        self.permute(y, &[2, 0, 1])
    }

    /// Rows of `x` (viewed as `[N, rest]`) selected by `index`.
    pub fn gather_rows(&self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(shape_err("gather_rows", xv.shape(), &[index.len()]));
        }
        let n = xv.shape()[0];
        let width = xv.numel() / n.max(1);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather_rows", xv.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            data.extend_from_slice(&xv.data()[i * width..(i + 1) * width]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = index.len();
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
                width,
            },
            &[x],
        ))
    }

    /// Concatenation along the trailing axis; leading axes must agree.
    pub fn concat_last(&self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
        let first = values
            .first()
            .ok_or_else(|| ArrayError::Config("concat of zero tensors".into()))?;
        let lead = &first.shape()[..first.rank() - 1];
        for v in &values {
            if v.rank() != first.rank() || &v.shape()[..v.rank() - 1] != lead {
                return Err(shape_err("concat", first.shape(), v.shape()));
            }
        }
        let outer: usize = lead.iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            inputs,
        ))
    }

    /// 2×2 average pooling on NHWC input with even spatial extents.
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(shape_err("avg_pool2", s, &[2, 2]));
        }
        let (batch, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); batch * oh * ow * c];
        for b in 0..batch {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = ((b * oh + y) * ow + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            out[o + ch] += quarter * xv.data()[i + ch];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new([batch, oh, ow, c], out)?,
            Op::AvgPool2 { x, batch, h, w, c },
            &[x],
        ))
    }

    /// Nearest-neighbour 2× upsampling on NHWC input.
    pub fn upsample2(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(shape_err("upsample2", s, &[2, 2]));
        }
        let (batch, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![T::zero(); batch * oh * ow * c];
        for b in 0..batch {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = ((b * oh + y) * ow + xx) * c;
                    let i = ((b * h + y / 2) * w + xx / 2) * c;
                    out[o..o + c].copy_from_slice(&xv.data()[i..i + c]);
                }
            }
        }
        Ok(self.push(
            Tensor::new([batch, oh, ow, c], out)?,
            Op::Upsample2 { x, batch, h, w, c },
            &[x],
        ))
    }

    /// `mean(|a - b|)`
    pub fn l1_loss(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }
}
