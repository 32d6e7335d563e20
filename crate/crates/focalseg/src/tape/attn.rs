//! Batched per-window, per-head attention primitives. Token matrices arrive
//! window-major ([windows*rows, dim] with head-blocked columns), logits are
//! [windows*heads*q, slots]. Each op is a loop of small strided GEMMs — one
//! per (window, head) block — with hand-derived adjoints.

use std::sync::Arc;

use super::linalg::{gemm_into, scratch_vec};
use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Marks a (query, slot) pair with no bias table entry (offsets that only
/// occur masked); the bias add skips it in both directions.
pub const BIAS_PAD: u32 = u32::MAX;

fn split_rows(op: &'static str, rows: usize, windows: usize) -> Result<usize> {
    if windows == 0 || rows % windows != 0 {
        return Err(Error::dim(op, format!("{} rows not divisible by {} windows", rows, windows)));
    }
    Ok(rows / windows)
}

fn head_dim(op: &'static str, d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim(op, format!("dim {} not divisible by {} heads", d, heads)));
    }
    Ok(d / heads)
}

impl<S: Scalar> Tape<S> {
    /// logits[w,h,q,r] = scale * sum_c Q[w,q,(h,c)] * K[w,r,(h,c)]
    /// q_w: [windows*qn, d], k_w: [windows*rn, d] -> [windows*heads*qn, rn].
    pub fn batched_qk_level(
        &mut self,
        q_w: Var,
        k_w: Var,
        windows: usize,
        heads: usize,
        scale: S,
    ) -> Result<Var> {
        let (sq, sk) = (self.value(q_w).shape().to_vec(), self.value(k_w).shape().to_vec());
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
            return Err(Error::dim("batched_qk", format!("q {:?}, k {:?}", sq, sk)));
        }
        let d = sq[1];
        let qn = split_rows("batched_qk", sq[0], windows)?;
        let rn = split_rows("batched_qk", sk[0], windows)?;
        let hd = head_dim("batched_qk", d, heads)?;
        let qv = self.value(q_w).clone();
        let kv = self.value(k_w).clone();

        // the (w, h) blocks tile the buffer exactly
        let mut out = scratch_vec(windows * heads * qn * rn);
        for w in 0..windows {
            for h in 0..heads {
                let qb = &qv.data()[w * qn * d + h * hd..];
                let kb = &kv.data()[w * rn * d + h * hd..];
                let cb = &mut out[((w * heads + h) * qn) * rn..];
                gemm_into(qn, hd, rn, scale, qb, d as isize, 1, kb, 1, d as isize, S::ZERO, cb, rn as isize, 1);
            }
        }
        let value = Tensor::new(&[windows * heads * qn, rn], out)?;
        let needs = self.needs_grad(q_w) || self.needs_grad(k_w);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(q_w) {
                        for w in 0..windows {
                            for h in 0..heads {
                                let gb = &g[((w * heads + h) * qn) * rn..];
                                let kb = &kv.data()[w * rn * d + h * hd..];
                                let db = &mut buf[w * qn * d + h * hd..];
                                // dQ += scale * G @ K
                                gemm_into(qn, rn, hd, scale, gb, rn as isize, 1, kb, d as isize, 1, S::ONE, db, d as isize, 1);
                            }
                        }
                    }
                    if let Some(buf) = t.grad_buf(k_w) {
                        for w in 0..windows {
                            for h in 0..heads {
                                let gb = &g[((w * heads + h) * qn) * rn..];
                                let qb = &qv.data()[w * qn * d + h * hd..];
                                let db = &mut buf[w * rn * d + h * hd..];
                                // dK += scale * G^T @ Q
                                gemm_into(rn, qn, hd, scale, gb, 1, rn as isize, qb, d as isize, 1, S::ONE, db, d as isize, 1);
                            }
                        }
                    }
                }) as _
            }),
        )
    }

    /// out[w,q,(h,c)] = sum_r A[w,h,q,col_off+r] * V[w,r,(h,c)]
    /// attn: [windows*heads*qn, s_total], v_w: [windows*rn, d] -> [windows*qn, d].
    /// One call per granularity level; level outputs are summed by the caller.
    pub fn attn_apply_level(
        &mut self,
        attn: Var,
        v_w: Var,
        windows: usize,
        heads: usize,
        col_off: usize,
    ) -> Result<Var> {
        let (sa, sv) = (self.value(attn).shape().to_vec(), self.value(v_w).shape().to_vec());
        if sa.len() != 2 || sv.len() != 2 {
            return Err(Error::dim("attn_apply", format!("attn {:?}, v {:?}", sa, sv)));
        }
        let s_total = sa[1];
        let d = sv[1];
        let qn = split_rows("attn_apply", sa[0], windows * heads)?;
        let rn = split_rows("attn_apply", sv[0], windows)?;
        let hd = head_dim("attn_apply", d, heads)?;
        if col_off + rn > s_total {
            return Err(Error::dim(
                "attn_apply",
                format!("slots [{}, {}) out of {}", col_off, col_off + rn, s_total),
            ));
        }
        let av = self.value(attn).clone();
        let vv = self.value(v_w).clone();

        // over h the column blocks tile d, over w the row blocks tile the rows
        let mut out = scratch_vec(windows * qn * d);
        for w in 0..windows {
            for h in 0..heads {
                let ab = &av.data()[((w * heads + h) * qn) * s_total + col_off..];
                let vb = &vv.data()[w * rn * d + h * hd..];
                let cb = &mut out[w * qn * d + h * hd..];
                gemm_into(qn, rn, hd, S::ONE, ab, s_total as isize, 1, vb, d as isize, 1, S::ZERO, cb, d as isize, 1);
            }
        }
        let value = Tensor::new(&[windows * qn, d], out)?;
        let needs = self.needs_grad(attn) || self.needs_grad(v_w);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(attn) {
                        for w in 0..windows {
                            for h in 0..heads {
                                let gb = &g[w * qn * d + h * hd..];
                                let vb = &vv.data()[w * rn * d + h * hd..];
                                let db = &mut buf[((w * heads + h) * qn) * s_total + col_off..];
                                // dA += G @ V^T
                                gemm_into(qn, hd, rn, S::ONE, gb, d as isize, 1, vb, 1, d as isize, S::ONE, db, s_total as isize, 1);
                            }
                        }
                    }
                    if let Some(buf) = t.grad_buf(v_w) {
                        for w in 0..windows {
                            for h in 0..heads {
                                let ab = &av.data()[((w * heads + h) * qn) * s_total + col_off..];
                                let gb = &g[w * qn * d + h * hd..];
                                let db = &mut buf[w * rn * d + h * hd..];
                                // dV += A^T @ G
                                gemm_into(rn, qn, hd, S::ONE, ab, 1, s_total as isize, gb, d as isize, 1, S::ONE, db, d as isize, 1);
                            }
                        }
                    }
                }) as _
            }),
        )
    }

    /// Adds a learnable relative-offset bias into one level's slot range.
    /// idx[q*rn + r] points into the table's per-head entry axis; identical
    /// for every window (the query/key offset pattern repeats per window).
    /// table: [heads, entries], logits: [windows*heads*qn, s_total].
    pub fn add_level_bias(
        &mut self,
        logits: Var,
        table: Var,
        windows: usize,
        heads: usize,
        col_off: usize,
        rn: usize,
        idx: Arc<Vec<u32>>,
    ) -> Result<Var> {
        let (sl, st) = (self.value(logits).shape().to_vec(), self.value(table).shape().to_vec());
        if sl.len() != 2 || st.len() != 2 || st[0] != heads {
            return Err(Error::dim("add_level_bias", format!("logits {:?}, table {:?}", sl, st)));
        }
        let s_total = sl[1];
        let qn = split_rows("add_level_bias", sl[0], windows * heads)?;
        if col_off + rn > s_total || idx.len() != qn * rn {
            return Err(Error::dim(
                "add_level_bias",
                format!("slots [{}, {}) of {}, idx len {}", col_off, col_off + rn, s_total, idx.len()),
            ));
        }
        let entries = st[1];
        for &i in idx.iter() {
            if i != BIAS_PAD && i as usize >= entries {
                return Err(Error::dim("add_level_bias", format!("bias index {} of {}", i, entries)));
            }
        }
        let td = self.value(table).data().to_vec();
        let mut out = self.value(logits).data().to_vec();
        for w in 0..windows {
            for h in 0..heads {
                let base = ((w * heads + h) * qn) * s_total;
                let trow = &td[h * entries..(h + 1) * entries];
                for q in 0..qn {
                    for r in 0..rn {
                        let i = idx[q * rn + r];
                        if i != BIAS_PAD {
                            out[base + q * s_total + col_off + r] += trow[i as usize];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&sl, out)?;
        let needs = self.needs_grad(logits) || self.needs_grad(table);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(logits) {
                        for (d, &gi) in buf.iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                    if let Some(buf) = t.grad_buf(table) {
                        for w in 0..windows {
                            for h in 0..heads {
                                let base = ((w * heads + h) * qn) * s_total;
                                for q in 0..qn {
                                    for r in 0..rn {
                                        let i = idx[q * rn + r];
                                        if i != BIAS_PAD {
                                            buf[h * entries + i as usize] +=
                                                g[base + q * s_total + col_off + r];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }) as _
            }),
        )
    }

    /// Adds the large-negative mask constant to slots whose source lies
    /// outside the map. valid is window-major: valid[w * s_total + slot].
    pub fn add_mask_slots(
        &mut self,
        logits: Var,
        windows: usize,
        heads: usize,
        valid: Arc<Vec<bool>>,
    ) -> Result<Var> {
        let sl = self.value(logits).shape().to_vec();
        if sl.len() != 2 {
            return Err(Error::dim("add_mask_slots", format!("logits {:?}", sl)));
        }
        let s_total = sl[1];
        let qn = split_rows("add_mask_slots", sl[0], windows * heads)?;
        if valid.len() != windows * s_total {
            return Err(Error::dim(
                "add_mask_slots",
                format!("valid len {} != windows*slots {}", valid.len(), windows * s_total),
            ));
        }
        let mut out = self.value(logits).data().to_vec();
        for w in 0..windows {
            let vrow = &valid[w * s_total..(w + 1) * s_total];
            for h in 0..heads {
                let base = ((w * heads + h) * qn) * s_total;
                for q in 0..qn {
                    let row = &mut out[base + q * s_total..base + (q + 1) * s_total];
                    for (o, &ok) in row.iter_mut().zip(vrow) {
                        if !ok {
                            *o = S::MASK;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&sl, out)?;
        let needs = self.needs_grad(logits);
        self.push(
            value,
            needs,
            needs.then(|| {
                Box::new(move |g: &[S], t: &mut Tape<S>| {
                    if let Some(buf) = t.grad_buf(logits) {
                        for w in 0..windows {
                            let vrow = &valid[w * s_total..(w + 1) * s_total];
                            for h in 0..heads {
                                let base = ((w * heads + h) * qn) * s_total;
                                for q in 0..qn {
                                    for (slot, &ok) in vrow.iter().enumerate() {
                                        if ok {
                                            buf[base + q * s_total + slot] += g[base + q * s_total + slot];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }) as _
            }),
        )
    }
}
