//! Pointwise ops, reductions and shape plumbing.

use super::{same_shape, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Tape<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out: Vec<S> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape(), out)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    for v in [a, b] {
                        if let Some(buf) = t.grad_buf(v) {
                            for (d, &gi) in buf.iter_mut().zip(g) {
                                *d += gi;
                            }
                        }
                    }
                }) as _
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out: Vec<S> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.value(a).shape(), out)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(a) {
                        for (d, &gi) in buf.iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                    if let Some(buf) = t.grad_buf(b) {
                        for (d, &gi) in buf.iter_mut().zip(g) {
                            *d -= gi;
                        }
                    }
                }) as _
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out: Vec<S> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape(), out)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(a) {
                        for ((d, &gi), &y) in buf.iter_mut().zip(g).zip(bv.data()) {
                            *d += gi * y;
                        }
                    }
                    if let Some(buf) = t.grad_buf(b) {
                        for ((d, &gi), &x) in buf.iter_mut().zip(g).zip(av.data()) {
                            *d += gi * x;
                        }
                    }
                }) as _
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out: Vec<S> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x / y).collect();
        let value = Tensor::new(av.shape(), out)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(a) {
                        for ((d, &gi), &y) in buf.iter_mut().zip(g).zip(bv.data()) {
                            *d += gi / y;
                        }
                    }
                    if let Some(buf) = t.grad_buf(b) {
                        for (i, (d, &gi)) in buf.iter_mut().zip(g).enumerate() {
                            let y = bv.data()[i];
                            *d -= gi * av.data()[i] / (y * y);
                        }
                    }
                }) as _
            }),
        )
    }

    /// y = a*x + b, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: Var, a: S, b: S) -> Result<Var> {
        let out: Vec<S> = self.value(x).data().iter().map(|&v| a * v + b).collect();
        let value = Tensor::new(self.value(x).shape(), out)?;
        let needs = self.needs_grad(x);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(x) {
                        for (d, &gi) in buf.iter_mut().zip(g) {
                            *d += a * gi;
                        }
                    }
                }) as _
            }),
        )
    }

    pub fn scale(&mut self, x: Var, a: S) -> Result<Var> {
        self.affine(x, a, S::ZERO)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let out: Vec<S> = xv.data().iter().map(|&v| v.maxv(S::ZERO)).collect();
        let value = Tensor::new(xv.shape(), out)?;
        let needs = self.needs_grad(x);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(x) {
                        for ((d, &gi), &v) in buf.iter_mut().zip(g).zip(xv.data()) {
                            if v > S::ZERO {
                                *d += gi;
                            }
                        }
                    }
                }) as _
            }),
        )
    }

    /// Tanh-form gelu: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    /// The forward tanh values are kept for the backward pass (tanh is the
    /// expensive part on both sides of the chain rule).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        let needs = self.needs_grad(x);
        let mut tanhs: Vec<S> = Vec::with_capacity(if needs { xv.numel() } else { 0 });
        let out: Vec<S> = xv
            .data()
            .iter()
            .map(|&v| {
                let th = (c * (v + k * v * v * v)).tanh();
                if needs {
                    tanhs.push(th);
                }
                half * v * (S::ONE + th)
            })
            .collect();
        let value = Tensor::new(xv.shape(), out)?;
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(x) {
                        for (i, (d, &gi)) in buf.iter_mut().zip(g).enumerate() {
                            let v = xv.data()[i];
                            let th = tanhs[i];
                            let sech2 = S::ONE - th * th;
                            let dinner = c * (S::ONE + S::from_f64(3.0) * k * v * v);
                            let dv = half * (S::ONE + th) + half * v * sech2 * dinner;
                            *d += gi * dv;
                        }
                    }
                }) as _
            }),
        )
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let out: Vec<S> = xv.data().iter().map(|&v| v.ln()).collect();
        let value = Tensor::new(xv.shape(), out)?;
        let needs = self.needs_grad(x);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(x) {
                        for ((d, &gi), &v) in buf.iter_mut().zip(g).zip(xv.data()) {
                            *d += gi / v;
                        }
                    }
                }) as _
            }),
        )
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let out: Vec<S> = self.value(x).data().iter().map(|&v| v.sqrt()).collect();
        let value = Tensor::new(self.value(x).shape(), out)?;
        let yv = value.clone();
        let needs = self.needs_grad(x);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(x) {
                        let two = S::from_f64(2.0);
                        for ((d, &gi), &y) in buf.iter_mut().zip(g).zip(yv.data()) {
                            *d += gi / (two * y);
                        }
                    }
                }) as _
            }),
        )
    }

    /// Clamp to [lo, hi]. Gradient passes only through the interior, so
    /// downstream log/div stay bounded without biasing in-range values.
    pub fn clip(&mut self, x: Var, lo: S, hi: S) -> Result<Var> {
        let xv = self.value(x).clone();
        let out: Vec<S> = xv.data().iter().map(|&v| v.maxv(lo).minv(hi)).collect();
        let value = Tensor::new(xv.shape(), out)?;
        let needs = self.needs_grad(x);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(x) {
                        for ((d, &gi), &v) in buf.iter_mut().zip(g).zip(xv.data()) {
                            if v > lo && v < hi {
                                *d += gi;
                            }
                        }
                    }
                }) as _
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: S = self.value(x).data().iter().copied().sum();
        let needs = self.needs_grad(x);
        self.push(
            Tensor::scalar(s),
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    let gi = g[0];
                    if let Some(buf) = t.grad_buf(x) {
                        for d in buf.iter_mut() {
                            *d += gi;
                        }
                    }
                }) as _
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, S::ONE / S::from_f64(n as f64))
    }

    /// Same storage, new shape; gradient is reshaped back untouched.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let needs = self.needs_grad(x);
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
                }) as _
            }),
        )
    }

    /// Concatenate along axis 0; trailing dims must match.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::dim("concat0", format!("{:?} vs {:?}", sa, sb)));
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut out = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let na = self.value(a).numel();
        let value = Tensor::new(&shape, out)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(a) {
                        for (d, &gi) in buf.iter_mut().zip(&g[..na]) {
                            *d += gi;
                        }
                    }
                    if let Some(buf) = t.grad_buf(b) {
                        for (d, &gi) in buf.iter_mut().zip(&g[na..]) {
                            *d += gi;
                        }
                    }
                }) as _
            }),
        )
    }

    /// Contiguous slice along axis 0.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::dim(
                "slice0",
                format!("[{}, {}) of axis len {:?}", start, start + len, shape.first()),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let out = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let value = Tensor::new(&out_shape, out)?;
        let needs = self.needs_grad(x);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(x) {
                        for (d, &gi) in buf[start * inner..].iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                }) as _
            }),
        )
    }

    /// Concatenate 2-D tensors along the last axis (shared row count).
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Parameter("concat_last needs at least one input".into()));
        }
        let rows = self.value(parts[0]).shape()[0];
        let mut cols = Vec::with_capacity(parts.len());
        for &p in parts {
            let sh = self.value(p).shape();
            if sh.len() != 2 || sh[0] != rows {
                return Err(Error::dim("concat_last", format!("want [{} x _], got {:?}", rows, sh)));
            }
            cols.push(sh[1]);
        }
        let total: usize = cols.iter().sum();
        let mut out = vec![S::ZERO; rows * total];
        let mut off = 0;
        for (&p, &c) in parts.iter().zip(&cols) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let value = Tensor::new(&[rows, total], out)?;
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        let parts = parts.to_vec();
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    let mut off = 0;
                    for (&p, &c) in parts.iter().zip(&cols) {
                        if let Some(buf) = t.grad_buf(p) {
                            for r in 0..rows {
                                for i in 0..c {
                                    buf[r * c + i] += g[r * total + off + i];
                                }
                            }
                        }
                        off += c;
                    }
                }) as _
            }),
        )
    }
}
