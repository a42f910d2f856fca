//! Differentiable tensor operations.
//!
//! Every op follows the same recipe: validate shapes, compute forward
//! values, and record a VJP closure that maps the output gradient to
//! per-parent gradients. Heavy kernels (matmul, bmm, conv2d, conv3d) run
//! their outer loops through [`crate::par`], writing disjoint output rows
//! so parallel and sequential execution are bit-identical.

use super::{strides_of, Tensor, VjpCtx};
use crate::error::{Error, Result};
use crate::par;

// Largest magnitude fed to exp(); beyond this sigmoid saturates anyway and
// exp() would overflow f64.
const EXP_CLAMP: f64 = 708.0;
// Largest representable double strictly below 1; sigmoid output is clamped
// here so it stays inside the open interval (0, 1).
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let values = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_op(
            "add",
            vec![self.clone(), other.clone()],
            self.shape().to_vec(),
            values,
            Box::new(|ctx: &VjpCtx| {
                vec![Some(ctx.out_grad.to_vec()), Some(ctx.out_grad.to_vec())]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let values = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_op(
            "sub",
            vec![self.clone(), other.clone()],
            self.shape().to_vec(),
            values,
            Box::new(|ctx: &VjpCtx| {
                vec![
                    Some(ctx.out_grad.to_vec()),
                    Some(ctx.out_grad.iter().map(|g| -g).collect()),
                ]
            }),
        )
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let values = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::from_op(
            "mul",
            vec![self.clone(), other.clone()],
            self.shape().to_vec(),
            values,
            Box::new(|ctx: &VjpCtx| {
                let a = ctx.parents[0].values();
                let b = ctx.parents[1].values();
                let da = ctx.out_grad.iter().zip(b.iter()).map(|(g, b)| g * b).collect();
                let db = ctx.out_grad.iter().zip(a.iter()).map(|(g, a)| g * a).collect();
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Elementwise add where `other` has the same rank and every axis is
    /// either equal to `self`'s or 1 (broadcast).
    pub fn add_bcast(&self, other: &Tensor) -> Result<Tensor> {
        bcast_binary("add_bcast", self, other, |a, b| a + b, BcastKind::Add)
    }

    /// Elementwise multiply with the same broadcast rule as [`Tensor::add_bcast`].
    pub fn mul_bcast(&self, other: &Tensor) -> Result<Tensor> {
        bcast_binary("mul_bcast", self, other, |a, b| a * b, BcastKind::Mul)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let values = self.values().iter().map(|v| v * c).collect();
        Tensor::from_op(
            "scale",
            vec![self.clone()],
            self.shape().to_vec(),
            values,
            Box::new(move |ctx: &VjpCtx| vec![Some(ctx.out_grad.iter().map(|g| g * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let values = self.values().iter().map(|v| v + c).collect();
        Tensor::from_op(
            "add_scalar",
            vec![self.clone()],
            self.shape().to_vec(),
            values,
            Box::new(|ctx: &VjpCtx| vec![Some(ctx.out_grad.to_vec())]),
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        let values = self.values().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(
            "relu",
            vec![self.clone()],
            self.shape().to_vec(),
            values,
            Box::new(|ctx: &VjpCtx| {
                let x = ctx.parents[0].values();
                vec![Some(
                    ctx.out_grad
                        .iter()
                        .zip(x.iter())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    pub fn abs(&self) -> Result<Tensor> {
        let values = self.values().iter().map(|v| v.abs()).collect();
        Tensor::from_op(
            "abs",
            vec![self.clone()],
            self.shape().to_vec(),
            values,
            Box::new(|ctx: &VjpCtx| {
                let x = ctx.parents[0].values();
                vec![Some(
                    ctx.out_grad
                        .iter()
                        .zip(x.iter())
                        .map(|(g, x)| if *x == 0.0 { 0.0 } else { g * x.signum() })
                        .collect(),
                )]
            }),
        )
    }

    /// Numerically stable logistic function. Inputs are clamped to ±708
    /// before exponentiation and the output is capped one ULP below 1, so
    /// the result is always strictly inside (0, 1).
    pub fn sigmoid(&self) -> Result<Tensor> {
        let values = self.values().iter().map(|&v| stable_sigmoid(v)).collect();
        Tensor::from_op(
            "sigmoid",
            vec![self.clone()],
            self.shape().to_vec(),
            values,
            Box::new(|ctx: &VjpCtx| {
                vec![Some(
                    ctx.out_grad
                        .iter()
                        .zip(ctx.out_values.iter())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect(),
                )]
            }),
        )
    }

    /// Natural log. Non-positive inputs produce a non-finite error at the
    /// op boundary rather than a NaN in the graph.
    pub fn ln(&self) -> Result<Tensor> {
        let values = self.values().iter().map(|v| v.ln()).collect();
        Tensor::from_op(
            "ln",
            vec![self.clone()],
            self.shape().to_vec(),
            values,
            Box::new(|ctx: &VjpCtx| {
                let x = ctx.parents[0].values();
                vec![Some(
                    ctx.out_grad.iter().zip(x.iter()).map(|(g, x)| g / x).collect(),
                )]
            }),
        )
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let total: f64 = self.values().iter().sum();
        let n = self.len();
        Tensor::from_op(
            "sum_all",
            vec![self.clone()],
            vec![1],
            vec![total],
            Box::new(move |ctx: &VjpCtx| vec![Some(vec![ctx.out_grad[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.len();
        let total: f64 = self.values().iter().sum();
        Tensor::from_op(
            "mean_all",
            vec![self.clone()],
            vec![1],
            vec![total / n as f64],
            Box::new(move |ctx: &VjpCtx| vec![Some(vec![ctx.out_grad[0] / n as f64; n])]),
        )
    }

    /// Mean along `axis`, removing it from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = lane_dims("mean_axis", self.shape(), axis)?;
        let x = self.values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0;
                for j in 0..len {
                    acc += x[(o * len + j) * inner + i];
                }
                out[o * inner + i] = acc / len as f64;
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let total = self.len();
        Tensor::from_op(
            "mean_axis",
            vec![self.clone()],
            shape,
            out,
            Box::new(move |ctx: &VjpCtx| {
                let mut dx = vec![0.0; total];
                for o in 0..outer {
                    for i in 0..inner {
                        let g = ctx.out_grad[o * inner + i] / len as f64;
                        for j in 0..len {
                            dx[(o * len + j) * inner + i] = g;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Maximum along `axis`, removing it from the shape. The gradient
    /// flows to the first maximal element of each lane.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = lane_dims("max_axis", self.shape(), axis)?;
        let x = self.values();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut best_j = 0;
                for j in 0..len {
                    let v = x[(o * len + j) * inner + i];
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = (o * len + best_j) * inner + i;
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let total = self.len();
        Tensor::from_op(
            "max_axis",
            vec![self.clone()],
            shape,
            out,
            Box::new(move |ctx: &VjpCtx| {
                let mut dx = vec![0.0; total];
                for (lane, &src) in argmax.iter().enumerate() {
                    dx[src] += ctx.out_grad[lane];
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Softmax along `axis` with max-subtraction for stability. Each lane
    /// sums to 1 within 1e-12.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = lane_dims("softmax", self.shape(), axis)?;
        let x = self.values();
        let mut out = vec![0.0; self.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..len {
                    m = m.max(x[idx(j)]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        drop(x);
        Tensor::from_op(
            "softmax",
            vec![self.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |ctx: &VjpCtx| {
                let s = ctx.out_values;
                let g = ctx.out_grad;
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[idx(j)] * s[idx(j)];
                        }
                        for j in 0..len {
                            dx[idx(j)] = s[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Normalize to zero mean and unit variance along `axis` (population
    /// variance, stabilized by `eps`). Affine scale/shift, when wanted, is
    /// applied by the caller with separate parameters.
    pub fn layer_norm(&self, axis: usize, eps: f64) -> Result<Tensor> {
        let (outer, len, inner) = lane_dims("layer_norm", self.shape(), axis)?;
        let x = self.values();
        let mut out = vec![0.0; self.len()];
        let mut inv_sigma = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mu = 0.0;
                for j in 0..len {
                    mu += x[idx(j)];
                }
                mu /= len as f64;
                let mut var = 0.0;
                for j in 0..len {
                    let d = x[idx(j)] - mu;
                    var += d * d;
                }
                var /= len as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_sigma[o * inner + i] = is;
                for j in 0..len {
                    out[idx(j)] = (x[idx(j)] - mu) * is;
                }
            }
        }
        drop(x);
        Tensor::from_op(
            "layer_norm",
            vec![self.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |ctx: &VjpCtx| {
                // dx = is * (g - mean(g) - xhat * mean(g ⊙ xhat))
                let xhat = ctx.out_values;
                let g = ctx.out_grad;
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let is = inv_sigma[o * inner + i];
                        let mut g_mean = 0.0;
                        let mut gx_mean = 0.0;
                        for j in 0..len {
                            g_mean += g[idx(j)];
                            gx_mean += g[idx(j)] * xhat[idx(j)];
                        }
                        g_mean /= len as f64;
                        gx_mean /= len as f64;
                        for j in 0..len {
                            dx[idx(j)] = is * (g[idx(j)] - g_mean - xhat[idx(j)] * gx_mean);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// 2-D matrix product `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::dim(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let values = matmul_raw(&self.values(), &other.values(), m, k, n);
        Tensor::from_op(
            "matmul",
            vec![self.clone(), other.clone()],
            vec![m, n],
            values,
            Box::new(move |ctx: &VjpCtx| {
                let (a_ref, b_ref) = (ctx.parents[0].values(), ctx.parents[1].values());
                let (a, b): (&[f64], &[f64]) = (&a_ref, &b_ref);
                let g = ctx.out_grad;
                // da[i,l] = Σ_j g[i,j] · b[l,j]
                let mut da = vec![0.0; m * k];
                par::for_each_chunk_mut(&mut da, k, |i, row| {
                    for (l, out) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * b[l * n + j];
                        }
                        *out = acc;
                    }
                });
                // db[l,j] = Σ_i a[i,l] · g[i,j]
                let mut db = vec![0.0; k * n];
                par::for_each_chunk_mut(&mut db, n, |l, row| {
                    for (j, out) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += a[i * k + l] * g[i * n + j];
                        }
                        *out = acc;
                    }
                });
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Batched matrix product `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 || other.rank() != 3 {
            return Err(Error::dim(
                "bmm",
                format!("expected rank-3 operands, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        }
        let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (bs2, k2, n) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        if bs != bs2 || k != k2 {
            return Err(Error::dim(
                "bmm",
                format!("batch/inner dimensions differ: {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let a_ref = self.values();
        let b_ref = other.values();
        let (a, b): (&[f64], &[f64]) = (&a_ref, &b_ref);
        let mut out = vec![0.0; bs * m * n];
        par::for_each_chunk_mut(&mut out, n, |row_idx, row| {
            let (batch, i) = (row_idx / m, row_idx % m);
            let a_row = &a[(batch * m + i) * k..(batch * m + i + 1) * k];
            let b_mat = &b[batch * k * n..(batch + 1) * k * n];
            for (j, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a_row[l] * b_mat[l * n + j];
                }
                *out = acc;
            }
        });
        drop(a_ref);
        drop(b_ref);
        Tensor::from_op(
            "bmm",
            vec![self.clone(), other.clone()],
            vec![bs, m, n],
            out,
            Box::new(move |ctx: &VjpCtx| {
                let (a_ref, b_ref) = (ctx.parents[0].values(), ctx.parents[1].values());
                let (a, b): (&[f64], &[f64]) = (&a_ref, &b_ref);
                let g = ctx.out_grad;
                let mut da = vec![0.0; bs * m * k];
                par::for_each_chunk_mut(&mut da, k, |row_idx, row| {
                    let (batch, i) = (row_idx / m, row_idx % m);
                    let g_row = &g[(batch * m + i) * n..(batch * m + i + 1) * n];
                    let b_mat = &b[batch * k * n..(batch + 1) * k * n];
                    for (l, out) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g_row[j] * b_mat[l * n + j];
                        }
                        *out = acc;
                    }
                });
                let mut db = vec![0.0; bs * k * n];
                par::for_each_chunk_mut(&mut db, n, |row_idx, row| {
                    let (batch, l) = (row_idx / k, row_idx % k);
                    for (j, out) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += a[(batch * m + i) * k + l] * g[(batch * m + i) * n + j];
                        }
                        *out = acc;
                    }
                });
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let (bs, m, n) = match self.shape() {
            [m, n] => (1, *m, *n),
            [b, m, n] => (*b, *m, *n),
            s => {
                return Err(Error::dim(
                    "transpose_last2",
                    format!("expected rank 2 or 3, got {s:?}"),
                ))
            }
        };
        let x = self.values();
        let mut out = vec![0.0; self.len()];
        for b in 0..bs {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = x[base + i * n + j];
                }
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Tensor::from_op(
            "transpose_last2",
            vec![self.clone()],
            shape,
            out,
            Box::new(move |ctx: &VjpCtx| {
                // transpose of the gradient: out is [.., n, m]
                let g = ctx.out_grad;
                let mut dx = vec![0.0; g.len()];
                for b in 0..bs {
                    let base = b * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            dx[base + i * n + j] = g[base + j * m + i];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Fused affine map: `x[N×K] · w[K×M] (+ b[M])`, one tape node.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        if self.rank() != 2 || w.rank() != 2 || self.shape()[1] != w.shape()[0] {
            return Err(Error::dim(
                "linear",
                format!("incompatible shapes {:?} · {:?}", self.shape(), w.shape()),
            ));
        }
        let (nrows, k) = (self.shape()[0], self.shape()[1]);
        let m = w.shape()[1];
        if let Some(b) = b {
            if b.shape() != [m] {
                return Err(Error::dim(
                    "linear",
                    format!("bias shape {:?} does not match output width {m}", b.shape()),
                ));
            }
        }
        let mut values = matmul_raw(&self.values(), &w.values(), nrows, k, m);
        if let Some(b) = b {
            let bv_ref = b.values();
            let bv: &[f64] = &bv_ref;
            par::for_each_chunk_mut(&mut values, m, |_, row| {
                for (v, b) in row.iter_mut().zip(bv.iter()) {
                    *v += b;
                }
            });
        }
        let mut parents = vec![self.clone(), w.clone()];
        let has_bias = b.is_some();
        if let Some(b) = b {
            parents.push(b.clone());
        }
        Tensor::from_op(
            "linear",
            parents,
            vec![nrows, m],
            values,
            Box::new(move |ctx: &VjpCtx| {
                let (x_ref, w_ref) = (ctx.parents[0].values(), ctx.parents[1].values());
                let (x, w): (&[f64], &[f64]) = (&x_ref, &w_ref);
                let g = ctx.out_grad;
                let mut dx = vec![0.0; nrows * k];
                par::for_each_chunk_mut(&mut dx, k, |i, row| {
                    for (l, out) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g[i * m + j] * w[l * m + j];
                        }
                        *out = acc;
                    }
                });
                let mut dw = vec![0.0; k * m];
                par::for_each_chunk_mut(&mut dw, m, |l, row| {
                    for (j, out) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for i in 0..nrows {
                            acc += x[i * k + l] * g[i * m + j];
                        }
                        *out = acc;
                    }
                });
                let mut grads = vec![Some(dx), Some(dw)];
                if has_bias {
                    let mut db = vec![0.0; m];
                    for i in 0..nrows {
                        for j in 0..m {
                            db[j] += g[i * m + j];
                        }
                    }
                    grads.push(Some(db));
                }
                grads
            }),
        )
    }

    /// 2-D cross-correlation: `x[C×H×W] * w[O×C×kh×kw] → [O×H'×W']`.
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if self.rank() != 3 || w.rank() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("expected x[C×H×W], w[O×C×kh×kw]; got {:?}, {:?}", self.shape(), w.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be ≥ 1"));
        }
        let (c, h, wid) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (o, c2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if c != c2 {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c} channels, kernel expects {c2}"),
            ));
        }
        if h + 2 * pad < kh || wid + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * pad, wid + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;

        let x_ref = self.values();
        let wv_ref = w.values();
        let (x, wv): (&[f64], &[f64]) = (&x_ref, &wv_ref);
        let mut out = vec![0.0; o * ho * wo];
        par::for_each_chunk_mut(&mut out, wo, |row_idx, row| {
            let (oc, yo) = (row_idx / ho, row_idx % ho);
            for (xo, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ky in 0..kh {
                        let y = (yo * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let xx = (xo * stride + kx) as isize - pad as isize;
                            if xx < 0 || xx >= wid as isize {
                                continue;
                            }
                            acc += x[(ci * h + y as usize) * wid + xx as usize]
                                * wv[((oc * c + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                *out = acc;
            }
        });
        drop(x_ref);
        drop(wv_ref);

        Tensor::from_op(
            "conv2d",
            vec![self.clone(), w.clone()],
            vec![o, ho, wo],
            out,
            Box::new(move |ctx: &VjpCtx| {
                let (x_ref, wv_ref) = (ctx.parents[0].values(), ctx.parents[1].values());
                let (x, wv): (&[f64], &[f64]) = (&x_ref, &wv_ref);
                let g = ctx.out_grad;
                // dx[ci,y,x] = Σ_{o,ky,kx} g[o,yo,xo] · w[o,ci,ky,kx]
                // with yo = (y + pad − ky)/stride when divisible and in range.
                let mut dx = vec![0.0; c * h * wid];
                par::for_each_chunk_mut(&mut dx, wid, |row_idx, row| {
                    let (ci, y) = (row_idx / h, row_idx % h);
                    for (xx, out) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for oc in 0..o {
                            for ky in 0..kh {
                                let ys = y + pad;
                                if ys < ky || (ys - ky) % stride != 0 {
                                    continue;
                                }
                                let yo = (ys - ky) / stride;
                                if yo >= ho {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let xs = xx + pad;
                                    if xs < kx || (xs - kx) % stride != 0 {
                                        continue;
                                    }
                                    let xo = (xs - kx) / stride;
                                    if xo >= wo {
                                        continue;
                                    }
                                    acc += g[(oc * ho + yo) * wo + xo]
                                        * wv[((oc * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        *out = acc;
                    }
                });
                // dw[o,ci,ky,kx] = Σ_{yo,xo} g[o,yo,xo] · x[ci, yo·s+ky−p, xo·s+kx−p]
                let mut dw = vec![0.0; o * c * kh * kw];
                par::for_each_chunk_mut(&mut dw, c * kh * kw, |oc, chunk| {
                    for (rest, out) in chunk.iter_mut().enumerate() {
                        let ci = rest / (kh * kw);
                        let ky = (rest / kw) % kh;
                        let kx = rest % kw;
                        let mut acc = 0.0;
                        for yo in 0..ho {
                            let y = (yo * stride + ky) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for xo in 0..wo {
                                let xx = (xo * stride + kx) as isize - pad as isize;
                                if xx < 0 || xx >= wid as isize {
                                    continue;
                                }
                                acc += g[(oc * ho + yo) * wo + xo]
                                    * x[(ci * h + y as usize) * wid + xx as usize];
                            }
                        }
                        *out = acc;
                    }
                });
                vec![Some(dx), Some(dw)]
            }),
        )
    }

    /// 3-D cross-correlation: `x[C×Z×H×W] * w[O×C×kz×kh×kw] → [O×Z'×H'×W']`.
    /// Doubles as the dense oracle for the sparse convolution tests.
    pub fn conv3d(&self, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if self.rank() != 4 || w.rank() != 5 {
            return Err(Error::dim(
                "conv3d",
                format!(
                    "expected x[C×Z×H×W], w[O×C×kz×kh×kw]; got {:?}, {:?}",
                    self.shape(),
                    w.shape()
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv3d", "stride must be ≥ 1"));
        }
        let (c, z, h, wid) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (o, c2) = (w.shape()[0], w.shape()[1]);
        let (kz, kh, kw) = (w.shape()[2], w.shape()[3], w.shape()[4]);
        if c != c2 {
            return Err(Error::dim(
                "conv3d",
                format!("input has {c} channels, kernel expects {c2}"),
            ));
        }
        if z + 2 * pad < kz || h + 2 * pad < kh || wid + 2 * pad < kw {
            return Err(Error::dim(
                "conv3d",
                format!(
                    "kernel {kz}×{kh}×{kw} larger than padded input {}×{}×{}",
                    z + 2 * pad,
                    h + 2 * pad,
                    wid + 2 * pad
                ),
            ));
        }
        let zo_n = (z + 2 * pad - kz) / stride + 1;
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;

        let x_ref = self.values();
        let wv_ref = w.values();
        let (x, wv): (&[f64], &[f64]) = (&x_ref, &wv_ref);
        let mut out = vec![0.0; o * zo_n * ho * wo];
        par::for_each_chunk_mut(&mut out, wo, |row_idx, row| {
            let oc = row_idx / (zo_n * ho);
            let zo = (row_idx / ho) % zo_n;
            let yo = row_idx % ho;
            for (xo, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for ci in 0..c {
                    for kzi in 0..kz {
                        let zz = (zo * stride + kzi) as isize - pad as isize;
                        if zz < 0 || zz >= z as isize {
                            continue;
                        }
                        for ky in 0..kh {
                            let y = (yo * stride + ky) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let xx = (xo * stride + kx) as isize - pad as isize;
                                if xx < 0 || xx >= wid as isize {
                                    continue;
                                }
                                acc += x[((ci * z + zz as usize) * h + y as usize) * wid
                                    + xx as usize]
                                    * wv[(((oc * c + ci) * kz + kzi) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
                *out = acc;
            }
        });
        drop(x_ref);
        drop(wv_ref);

        Tensor::from_op(
            "conv3d",
            vec![self.clone(), w.clone()],
            vec![o, zo_n, ho, wo],
            out,
            Box::new(move |ctx: &VjpCtx| {
                let (x_ref, wv_ref) = (ctx.parents[0].values(), ctx.parents[1].values());
                let (x, wv): (&[f64], &[f64]) = (&x_ref, &wv_ref);
                let g = ctx.out_grad;
                let mut dx = vec![0.0; c * z * h * wid];
                par::for_each_chunk_mut(&mut dx, wid, |row_idx, row| {
                    let ci = row_idx / (z * h);
                    let zz = (row_idx / h) % z;
                    let y = row_idx % h;
                    for (xx, out) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for oc in 0..o {
                            for kzi in 0..kz {
                                let zs = zz + pad;
                                if zs < kzi || (zs - kzi) % stride != 0 {
                                    continue;
                                }
                                let zo = (zs - kzi) / stride;
                                if zo >= zo_n {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let ys = y + pad;
                                    if ys < ky || (ys - ky) % stride != 0 {
                                        continue;
                                    }
                                    let yo = (ys - ky) / stride;
                                    if yo >= ho {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let xs = xx + pad;
                                        if xs < kx || (xs - kx) % stride != 0 {
                                            continue;
                                        }
                                        let xo = (xs - kx) / stride;
                                        if xo >= wo {
                                            continue;
                                        }
                                        acc += g[((oc * zo_n + zo) * ho + yo) * wo + xo]
                                            * wv[(((oc * c + ci) * kz + kzi) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        *out = acc;
                    }
                });
                let mut dw = vec![0.0; o * c * kz * kh * kw];
                par::for_each_chunk_mut(&mut dw, c * kz * kh * kw, |oc, chunk| {
                    for (rest, out) in chunk.iter_mut().enumerate() {
                        let ci = rest / (kz * kh * kw);
                        let kzi = (rest / (kh * kw)) % kz;
                        let ky = (rest / kw) % kh;
                        let kx = rest % kw;
                        let mut acc = 0.0;
                        for zo in 0..zo_n {
                            let zz = (zo * stride + kzi) as isize - pad as isize;
                            if zz < 0 || zz >= z as isize {
                                continue;
                            }
                            for yo in 0..ho {
                                let y = (yo * stride + ky) as isize - pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for xo in 0..wo {
                                    let xx = (xo * stride + kx) as isize - pad as isize;
                                    if xx < 0 || xx >= wid as isize {
                                        continue;
                                    }
                                    acc += g[((oc * zo_n + zo) * ho + yo) * wo + xo]
                                        * x[((ci * z + zz as usize) * h + y as usize) * wid
                                            + xx as usize];
                                }
                            }
                        }
                        *out = acc;
                    }
                });
                vec![Some(dx), Some(dw)]
            }),
        )
    }

    /// Reinterpret the value order under a new shape of equal size.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape()),
            ));
        }
        Tensor::from_op(
            "reshape",
            vec![self.clone()],
            shape.to_vec(),
            self.to_vec(),
            Box::new(|ctx: &VjpCtx| vec![Some(ctx.out_grad.to_vec())]),
        )
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim(
                "slice",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let dim = self.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} exceeds axis of length {dim}", start + len),
            ));
        }
        let (outer, _, inner) = lane_dims("slice", self.shape(), axis)?;
        let x = self.values();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.len();
        Tensor::from_op(
            "slice",
            vec![self.clone()],
            shape,
            out,
            Box::new(move |ctx: &VjpCtx| {
                let mut dx = vec![0.0; total];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * dim + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&ctx.out_grad[src..src + len * inner]);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Arbitrary re-indexing: `out[i] = self[indices[i]]` under `shape`.
    /// The gradient scatter-adds back, so repeated indices are allowed.
    pub fn gather(&self, indices: &[usize], shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return Err(Error::dim(
                "gather",
                format!("shape {shape:?} wants {n} indices, got {}", indices.len()),
            ));
        }
        let src_len = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src_len) {
            return Err(Error::contract(
                "gather",
                format!("index {bad} out of range for {src_len} source elements"),
            ));
        }
        let x_ref = self.values();
        let x: &[f64] = &x_ref;
        let out = par::map_collect(indices.len(), |i| x[indices[i]]);
        drop(x_ref);
        let indices = indices.to_vec();
        Tensor::from_op(
            "gather",
            vec![self.clone()],
            shape.to_vec(),
            out,
            Box::new(move |ctx: &VjpCtx| {
                let mut dx = vec![0.0; src_len];
                for (i, &src) in indices.iter().enumerate() {
                    dx[src] += ctx.out_grad[i];
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Add a learnable positional table `[T×C]` to a token batch `[B×T×C]`.
    pub fn embedding_add(&self, table: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 || table.rank() != 2 {
            return Err(Error::dim(
                "embedding_add",
                format!("expected tokens[B×T×C] and table[T×C], got {:?}, {:?}", self.shape(), table.shape()),
            ));
        }
        if self.shape()[1..] != *table.shape() {
            return Err(Error::dim(
                "embedding_add",
                format!("table shape {:?} does not match token shape {:?}", table.shape(), self.shape()),
            ));
        }
        let reshaped = table.reshape(&[1, table.shape()[0], table.shape()[1]])?;
        self.add_bcast(&reshaped)
    }
}

/// Concatenate along `axis`; all other axes must agree.
pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
    if tensors.is_empty() {
        return Err(Error::contract("concat", "need at least one tensor"));
    }
    let rank = tensors[0].rank();
    if axis >= rank {
        return Err(Error::dim(
            "concat",
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    for t in tensors {
        if t.rank() != rank {
            return Err(Error::dim("concat", "rank mismatch between operands"));
        }
        for (ax, (a, b)) in tensors[0].shape().iter().zip(t.shape()).enumerate() {
            if ax != axis && a != b {
                return Err(Error::dim(
                    "concat",
                    format!(
                        "shapes {:?} and {:?} differ outside concat axis {axis}",
                        tensors[0].shape(),
                        t.shape()
                    ),
                ));
            }
        }
    }
    let (outer, _, inner) = lane_dims("concat", tensors[0].shape(), axis)?;
    let axis_lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
    let total_axis: usize = axis_lens.iter().sum();

    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for (t, &alen) in tensors.iter().zip(&axis_lens) {
            let x = t.values();
            out.extend_from_slice(&x[o * alen * inner..(o + 1) * alen * inner]);
        }
    }
    let mut shape = tensors[0].shape().to_vec();
    shape[axis] = total_axis;
    let parents: Vec<Tensor> = tensors.iter().map(|t| (*t).clone()).collect();
    Tensor::from_op(
        "concat",
        parents,
        shape,
        out,
        Box::new(move |ctx: &VjpCtx| {
            let mut grads: Vec<Vec<f64>> = axis_lens
                .iter()
                .map(|&alen| Vec::with_capacity(outer * alen * inner))
                .collect();
            let mut cursor = 0;
            for _ in 0..outer {
                for (gvec, &alen) in grads.iter_mut().zip(&axis_lens) {
                    gvec.extend_from_slice(&ctx.out_grad[cursor..cursor + alen * inner]);
                    cursor += alen * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    )
}

/// Decompose `shape` around `axis` into (outer, axis length, inner).
fn lane_dims(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn stable_sigmoid(x: f64) -> f64 {
    let x = x.clamp(-EXP_CLAMP, EXP_CLAMP);
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.min(ONE_BELOW)
}

/// Row-parallel dense matmul on raw slices.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

enum BcastKind {
    Add,
    Mul,
}

/// Shared forward/backward for the limited broadcast ops: `other` must
/// have the same rank as `a` with each axis equal or 1.
fn bcast_binary(
    op: &'static str,
    a: &Tensor,
    other: &Tensor,
    f: fn(f64, f64) -> f64,
    kind: BcastKind,
) -> Result<Tensor> {
    if a.rank() != other.rank() {
        return Err(Error::dim(
            op,
            format!("rank mismatch: {:?} vs {:?}", a.shape(), other.shape()),
        ));
    }
    for (&da, &db) in a.shape().iter().zip(other.shape()) {
        if db != da && db != 1 {
            return Err(Error::dim(
                op,
                format!("cannot broadcast {:?} onto {:?}", other.shape(), a.shape()),
            ));
        }
    }
    let a_shape = a.shape().to_vec();
    let b_shape = other.shape().to_vec();
    let a_strides = strides_of(&a_shape);
    let b_strides = strides_of(&b_shape);
    // stride 0 on broadcast axes maps output indices straight to b indices
    let b_eff: Vec<usize> = b_shape
        .iter()
        .zip(&b_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let map_b = move |flat: usize| -> usize {
        let mut rem = flat;
        let mut bi = 0;
        for (stride_a, stride_b) in a_strides.iter().zip(&b_eff) {
            let idx = rem / stride_a;
            rem %= stride_a;
            bi += idx * stride_b;
        }
        bi
    };

    let av = a.values();
    let bv = other.values();
    let values: Vec<f64> = (0..a.len()).map(|i| f(av[i], bv[map_b(i)])).collect();
    drop(av);
    drop(bv);

    let b_len = other.len();
    Tensor::from_op(
        op,
        vec![a.clone(), other.clone()],
        a_shape,
        values,
        Box::new(move |ctx: &VjpCtx| {
            let g = ctx.out_grad;
            let (da, db) = match kind {
                BcastKind::Add => {
                    let da = g.to_vec();
                    let mut db = vec![0.0; b_len];
                    for (i, gi) in g.iter().enumerate() {
                        db[map_b(i)] += gi;
                    }
                    (da, db)
                }
                BcastKind::Mul => {
                    let av = ctx.parents[0].values();
                    let bv = ctx.parents[1].values();
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; b_len];
                    for (i, gi) in g.iter().enumerate() {
                        let bi = map_b(i);
                        da[i] = gi * bv[bi];
                        db[bi] += gi * av[i];
                    }
                    (da, db)
                }
            };
            vec![Some(da), Some(db)]
        }),
    )
}
