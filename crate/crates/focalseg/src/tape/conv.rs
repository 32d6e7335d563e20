//! 2-D convolution (cross-correlation) and its stride-2 transposed inverse,
//! both lowered to GEMM. The unfolded column buffer from the forward pass is
//! kept alive for the weight gradient.

use std::sync::Arc;

use super::linalg::{gemm_into, scratch_vec};
use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// col[(ci*kh*kw), (oh*ow)] with zero padding outside the input. Row-per-tap
/// layout: at stride 1 each (ci, ky, kx) row is filled with contiguous
/// copies of input rows, and the GEMM consumes contiguous rows.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let m = oh * ow;
    // stride 1 writes every element (padding regions are zeroed explicitly),
    // so it can start from uninitialized scratch; the strided path gathers
    // sparsely and needs the zero fill.
    let mut col =
        if stride == 1 { scratch_vec(cin * kh * kw * m) } else { vec![S::ZERO; cin * kh * kw * m] };
    let mut r = 0;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[r * m..(r + 1) * m];
                r += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        if stride == 1 {
                            dst[oy * ow..(oy + 1) * ow].fill(S::ZERO);
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // ix = ox + kx - pad in [0, w)
                        let ox0 = pad.saturating_sub(kx).min(ow);
                        let ox1 = (w + pad - kx).min(ow).max(ox0);
                        dst_row[..ox0].fill(S::ZERO);
                        if ox0 < ox1 {
                            dst_row[ox0..ox1]
                                .copy_from_slice(&src_row[ox0 + kx - pad..ox1 + kx - pad]);
                        }
                        dst_row[ox1..].fill(S::ZERO);
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of `im2col`: folds a [(ci*kh*kw), (oh*ow)] gradient back onto the
/// input raster, accumulating where taps overlap.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<S: Scalar>(
    dcol: &[S],
    buf: &mut [S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let m = oh * ow;
    let mut r = 0;
    for ci in 0..cin {
        let plane = &mut buf[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &dcol[r * m..(r + 1) * m];
                r += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let ox0 = pad.saturating_sub(kx);
                        let ox1 = (w + pad - kx).min(ow);
                        for ox in ox0..ox1 {
                            dst_row[ox + kx - pad] += src_row[ox];
                        }
                    } else {
                        for (ox, s) in src_row.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst_row[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// x:[cin,h,w] * w:[cout,cin,kh,kw] + b:[cout] -> [cout,oh,ow].
    /// Cross-correlation (no kernel flip), zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) =
            (self.value(x).shape().to_vec(), self.value(weight).shape().to_vec(), self.value(bias).shape());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sb != [sw[0]] {
            return Err(Error::dim(
                "conv2d",
                format!("x {:?}, w {:?}, b {:?}", sx, sw, sb),
            ));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim("conv2d", format!("kernel {}x{} exceeds padded input", kh, kw)));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let kk = cin * kh * kw;
        let m = oh * ow;

        let xv = self.value(x).clone();
        let wv = self.value(weight).clone();
        let bd = self.value(bias).data();
        let col = Arc::new(im2col(xv.data(), cin, h, w, kh, kw, stride, pad, oh, ow));

        // y[cout, m] = W'[cout, kk] x col[kk, m]
        let mut out = scratch_vec(cout * m);
        gemm_into(cout, kk, m, S::ONE, wv.data(), kk as isize, 1, &col, m as isize, 1, S::ZERO, &mut out, m as isize, 1);
        for co in 0..cout {
            let b = bd[co];
            for v in &mut out[co * m..(co + 1) * m] {
                *v += b;
            }
        }
        let value = Tensor::new(&[cout, oh, ow], out)?;
        let needs = self.needs_grad(x) || self.needs_grad(weight) || self.needs_grad(bias);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(bias) {
                        for co in 0..cout {
                            buf[co] += g[co * m..(co + 1) * m].iter().copied().sum::<S>();
                        }
                    }
                    if let Some(buf) = t.grad_buf(weight) {
                        // dW'[cout, kk] += G[cout, m] x col^T[m, kk]
                        gemm_into(cout, m, kk, S::ONE, g, m as isize, 1, &col, 1, m as isize, S::ONE, buf, kk as isize, 1);
                    }
                    if let Some(buf) = t.grad_buf(x) {
                        // dcol[kk, m] = W'^T[kk, cout] x G[cout, m], folded back
                        let mut dcol = scratch_vec(kk * m);
                        gemm_into(kk, cout, m, S::ONE, wv.data(), 1, kk as isize, g, m as isize, 1, S::ZERO, &mut dcol, m as isize, 1);
                        col2im_acc(&dcol, buf, cin, h, w, kh, kw, stride, pad, oh, ow);
                    }
                }) as _
            }),
        )
    }

    /// Transposed conv, x:[cin,h,w] * w:[cin,cout,k,k] + b:[cout] ->
    /// [cout, (h-1)*stride+k, (w-1)*stride+k]. With k == stride this is the
    /// exact upsampling inverse of a stride-k patching.
    pub fn conv2d_transpose(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (sx, sw, sb) =
            (self.value(x).shape().to_vec(), self.value(weight).shape().to_vec(), self.value(bias).shape());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != sw[3] || sb != [sw[1]] {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("x {:?}, w {:?}, b {:?}", sx, sw, sb),
            ));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d_transpose stride must be >= 1".into()));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[1], sw[2]);
        let (oh, ow) = ((h - 1) * stride + k, (w - 1) * stride + k);
        let m = h * w;
        let ck = cout * k * k;

        let xv = self.value(x).clone();
        let wv = self.value(weight).clone();
        let bd = self.value(bias).data();

        // cols[ck, m] = W^T[ck, cin] x X[cin, m]; row r = (co, ky, kx)
        let mut cols = scratch_vec(ck * m);
        gemm_into(ck, cin, m, S::ONE, wv.data(), 1, ck as isize, xv.data(), m as isize, 1, S::ZERO, &mut cols, m as isize, 1);

        // seed the raster with the bias, then accumulate overlapping taps
        let mut out = scratch_vec(cout * oh * ow);
        for co in 0..cout {
            let b = bd[co];
            out[co * oh * ow..(co + 1) * oh * ow].fill(b);
        }
        let mut r = 0;
        for co in 0..cout {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[r * m..(r + 1) * m];
                    r += 1;
                    for iy in 0..h {
                        let base = (co * oh + iy * stride + ky) * ow + kx;
                        for ix in 0..w {
                            out[base + ix * stride] += src[iy * w + ix];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[cout, oh, ow], out)?;
        let needs = self.needs_grad(x) || self.needs_grad(weight) || self.needs_grad(bias);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(bias) {
                        for co in 0..cout {
                            buf[co] += g[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum::<S>();
                        }
                    }
                    // dcols[ck, m] gathered from g: every (r, iy, ix) written
                    let mut dcols = scratch_vec(ck * m);
                    let mut r = 0;
                    for co in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let dst = &mut dcols[r * m..(r + 1) * m];
                                r += 1;
                                for iy in 0..h {
                                    let base = (co * oh + iy * stride + ky) * ow + kx;
                                    for ix in 0..w {
                                        dst[iy * w + ix] = g[base + ix * stride];
                                    }
                                }
                            }
                        }
                    }
                    if let Some(buf) = t.grad_buf(x) {
                        // dX[cin, m] += W[cin, ck] x dcols[ck, m]
                        gemm_into(cin, ck, m, S::ONE, wv.data(), ck as isize, 1, &dcols, m as isize, 1, S::ONE, buf, m as isize, 1);
                    }
                    if let Some(buf) = t.grad_buf(weight) {
                        // dW[cin, ck] += X[cin, m] x dcols^T[m, ck]
                        gemm_into(cin, m, ck, S::ONE, xv.data(), m as isize, 1, &dcols, 1, m as isize, S::ONE, buf, ck as isize, 1);
                    }
                }) as _
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    /// Direct summation reference for conv2d.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        cin: usize,
        h: usize,
        wid: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wid + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wid {
                                    acc += x[(ci * h + iy as usize) * wid + ix as usize]
                                        * w[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut tp = Tape::<f64>::new();
        let xv: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let x = tp.constant(t(&[1, 3, 3], &xv));
        let w = tp.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tp.constant(t(&[1], &[0.0]));
        let y = tp.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tp.value(y).data(), &xv[..]);
    }

    #[test]
    fn all_ones_3x3_on_ones_gives_9() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::full(&[1, 5, 5], 1.0));
        let w = tp.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tp.constant(Tensor::zeros(&[1]));
        let y = tp.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tp.value(y).shape(), &[1, 3, 3]);
        assert!(tp.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn zero_input_passes_bias_through() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tp.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let b = tp.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let y = tp.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tp.value(y).shape(), &[3, 4, 4]);
        for co in 0..3 {
            for i in 0..16 {
                assert_eq!(tp.value(y).data()[co * 16 + i], tp.value(b).data()[co]);
            }
        }
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut tp = Tape::<f64>::new();
        let (cin, h, w, cout, k) = (3, 6, 5, 4, 3);
        let xv: Vec<f64> = (0..cin * h * w).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.25).collect();
        let wv: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 5 % 11) as f64 - 5.0) * 0.1).collect();
        let bv = vec![0.3, -0.2, 0.1, 0.0];
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let x = tp.constant(t(&[cin, h, w], &xv));
            let wt = tp.constant(t(&[cout, cin, k, k], &wv));
            let b = tp.constant(t(&[cout], &bv));
            let y = tp.conv2d(x, wt, b, stride, pad).unwrap();
            let want = conv_oracle(&xv, &wv, &bv, cin, h, w, cout, k, stride, pad);
            assert_eq!(tp.value(y).numel(), want.len());
            for (got, want) in tp.value(y).data().iter().zip(&want) {
                assert!((got - want).abs() < 1e-12, "stride {} pad {}", stride, pad);
            }
        }
    }

    #[test]
    fn transpose_doubles_resolution() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        // kernel that writes the input value to the top-left of each 2x2 cell
        let w = tp.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 0.]));
        let b = tp.constant(Tensor::zeros(&[1]));
        let y = tp.conv2d_transpose(x, w, b, 2).unwrap();
        assert_eq!(tp.value(y).shape(), &[1, 4, 4]);
        let v = tp.value(y).data();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[2], 2.0);
        assert_eq!(v[8], 3.0);
        assert_eq!(v[10], 4.0);
        assert_eq!(v[1] + v[3] + v[5], 0.0);
    }

    #[test]
    fn transpose_is_adjoint_of_strided_patch_sum() {
        // direct check of the scatter formula on a small random case
        let mut tp = Tape::<f64>::new();
        let (cin, cout, h, w, k) = (2, 3, 3, 2, 2);
        let xv: Vec<f64> = (0..cin * h * w).map(|i| (i as f64 * 0.9).sin()).collect();
        let wv: Vec<f64> = (0..cin * cout * k * k).map(|i| (i as f64 * 0.4).cos()).collect();
        let x = tp.constant(t(&[cin, h, w], &xv));
        let wt = tp.constant(t(&[cin, cout, k, k], &wv));
        let b = tp.constant(Tensor::zeros(&[cout]));
        let y = tp.conv2d_transpose(x, wt, b, 2).unwrap();
        let (oh, ow) = ((h - 1) * 2 + k, (w - 1) * 2 + k);
        let mut want = vec![0.0; cout * oh * ow];
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..w {
                    for co in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                want[(co * oh + iy * 2 + ky) * ow + ix * 2 + kx] += xv
                                    [(ci * h + iy) * w + ix]
                                    * wv[((ci * cout + co) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
        for (got, want) in tp.value(y).data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
