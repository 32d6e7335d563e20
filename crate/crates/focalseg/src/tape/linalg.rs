//! Matrix multiply, row bias, softmax and layer norm.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uninitialized scratch for transients that are fully overwritten before
/// any read: GEMM outputs with beta = 0 (matrixmultiply documents C as
/// write-only in that case) and exhaustive fill loops. Skips the memset
/// `vec![0; n]` would pay on every call, which is material on the
/// multi-megabyte convolution buffers.
pub(crate) fn scratch_vec<S: Scalar>(n: usize) -> Vec<S> {
    let mut v = Vec::with_capacity(n);
    #[allow(clippy::uninit_vec)]
    unsafe {
        v.set_len(n)
    };
    v
}

/// C(m x n) += alpha * A(m x k) * B(k x n) over raw slices, row-major unless
/// the stride args say otherwise. Thin wrapper so call sites stay readable.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    rsa: isize,
    csa: isize,
    b: &[S],
    rsb: isize,
    csb: isize,
    beta: S,
    c: &mut [S],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        S::gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc)
    }
}

impl<S: Scalar> Tape<S> {
    /// y = a @ b for a:[m,k], b:[k,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{:?} @ {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let mut out = scratch_vec(m * n);
        gemm_into(m, k, n, S::ONE, av.data(), k as isize, 1, bv.data(), n as isize, 1, S::ZERO, &mut out, n as isize, 1);
        let value = Tensor::new(&[m, n], out)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(a) {
                        // dA += G @ B^T
                        gemm_into(m, n, k, S::ONE, g, n as isize, 1, bv.data(), 1, n as isize, S::ONE, buf, k as isize, 1);
                    }
                    if let Some(buf) = t.grad_buf(b) {
                        // dB += A^T @ G
                        gemm_into(k, m, n, S::ONE, av.data(), 1, k as isize, g, n as isize, 1, S::ONE, buf, n as isize, 1);
                    }
                }) as _
            }),
        )
    }

    /// x:[r,c] + b:[c], broadcast over rows.
    pub fn bias_add_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::dim("bias_add_rows", format!("{:?} + {:?}", sx, sb)));
        }
        let (r, c) = (sx[0], sx[1]);
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bi) in row.iter_mut().zip(&bd) {
                *o += bi;
            }
        }
        let value = Tensor::new(&[r, c], out)?;
        let needs = self.needs_grad(x) || self.needs_grad(b);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(x) {
                        for (d, &gi) in buf.iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                    if let Some(buf) = t.grad_buf(b) {
                        for row in g.chunks(c) {
                            for (d, &gi) in buf.iter_mut().zip(row) {
                                *d += gi;
                            }
                        }
                    }
                }) as _
            }),
        )
    }

    /// Numerically stable softmax along `axis`. Max subtraction makes the
    /// large-negative mask convention exact: exp(MASK - max) underflows to 0.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {} of {:?}", axis, shape)));
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = self.value(x).data();
        // every element is written in the exp pass below
        let mut out = scratch_vec(xd.len());
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut mx = xd[base];
                for j in 1..axis_len {
                    mx = mx.maxv(xd[base + j * inner]);
                }
                let mut sum = S::ZERO;
                for j in 0..axis_len {
                    let e = (xd[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..axis_len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let yv = value.clone();
        let needs = self.needs_grad(x);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(x) {
                        let y = yv.data();
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * axis_len * inner + i;
                                let mut dot = S::ZERO;
                                for j in 0..axis_len {
                                    let p = base + j * inner;
                                    dot += g[p] * y[p];
                                }
                                for j in 0..axis_len {
                                    let p = base + j * inner;
                                    buf[p] += y[p] * (g[p] - dot);
                                }
                            }
                        }
                    }
                }) as _
            }),
        )
    }

    /// Per-row layer norm over the last axis of x:[r,c], with learnable
    /// gamma/beta:[c]. Population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (sx, sg, sb) =
            (self.value(x).shape(), self.value(gamma).shape(), self.value(beta).shape());
        if sx.len() != 2 || sg != [sx[1]] || sb != [sx[1]] {
            return Err(Error::dim(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", sx, sg, sb),
            ));
        }
        let (r, c) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data();
        // all three are fully written in the loop below
        let mut out = scratch_vec(r * c);
        let mut xhat = scratch_vec(r * c);
        let mut inv_std = scratch_vec(r);
        let cn = S::from_f64(c as f64);
        for row in 0..r {
            let xs = &xd[row * c..(row + 1) * c];
            let mean = xs.iter().copied().sum::<S>() / cn;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cn;
            let istd = S::ONE / (var + eps).sqrt();
            inv_std[row] = istd;
            for j in 0..c {
                let h = (xs[j] - mean) * istd;
                xhat[row * c + j] = h;
                out[row * c + j] = gd[j] * h + bd[j];
            }
        }
        let value = Tensor::new(&[r, c], out)?;
        let needs = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(gamma) {
                        for row in 0..r {
                            for j in 0..c {
                                buf[j] += g[row * c + j] * xhat[row * c + j];
                            }
                        }
                    }
                    if let Some(buf) = t.grad_buf(beta) {
                        for row in 0..r {
                            for j in 0..c {
                                buf[j] += g[row * c + j];
                            }
                        }
                    }
                    if let Some(buf) = t.grad_buf(x) {
                        // dx = istd * (dh - mean(dh) - xhat * mean(dh*xhat)), dh = g*gamma
                        for row in 0..r {
                            let mut mean_dh = S::ZERO;
                            let mut mean_dhx = S::ZERO;
                            for j in 0..c {
                                let dh = g[row * c + j] * gd[j];
                                mean_dh += dh;
                                mean_dhx += dh * xhat[row * c + j];
                            }
                            mean_dh /= cn;
                            mean_dhx /= cn;
                            for j in 0..c {
                                let dh = g[row * c + j] * gd[j];
                                buf[row * c + j] +=
                                    inv_std[row] * (dh - mean_dh - xhat[row * c + j] * mean_dhx);
                            }
                        }
                    }
                }) as _
            }),
        )
    }
}
