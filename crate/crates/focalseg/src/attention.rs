//! Multi-granularity window attention.
//!
//! Tokens live in row-major [N, d] matrices tied to an (h, w) map. Attention
//! is computed per non-overlapping query window: each query attends a small
//! fixed candidate set made of, per granularity level, a region of pooled
//! cells centered on its window. Level 1 is unpooled (sub-window 1), so with
//! region = window the level-1 candidates are exactly the window's own tokens;
//! coarser levels summarize sub-windows via a learned linear pooling and
//! extend the field of view at constant cost.
//!
//! All index arithmetic is frozen into gather plans at construction:
//! per-level pooling columns, candidate-cell gathers with out-of-map padding,
//! window partition/reverse permutations, the shared relative-offset bias
//! indices and the validity mask.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GatherPlan, Tape, Var, BIAS_PAD};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocalConfig {
    /// Token embedding dim.
    pub dim: usize,
    pub heads: usize,
    /// Query window side, in tokens.
    pub window: usize,
    /// Per-level pooling sub-window sides; level 1 must be 1 (no pooling).
    pub sub_windows: Vec<usize>,
    /// Per-level candidate region sides, in that level's pooled cells.
    pub regions: Vec<usize>,
}

impl FocalConfig {
    pub fn levels(&self) -> usize {
        self.sub_windows.len()
    }

    /// Candidate slots each query attends to: sum of region^2 over levels.
    pub fn attended_tokens(&self) -> usize {
        self.regions.iter().map(|r| r * r).sum()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.sub_windows.is_empty() || self.sub_windows.len() != self.regions.len() {
            return Err(Error::Parameter(format!(
                "need matching non-empty level lists, got {} sub-windows / {} regions",
                self.sub_windows.len(),
                self.regions.len()
            )));
        }
        if self.sub_windows[0] != 1 {
            return Err(Error::Parameter(format!(
                "finest level must be unpooled (sub-window 1), got {}",
                self.sub_windows[0]
            )));
        }
        if self.window == 0 || self.dim == 0 || self.heads == 0 {
            return Err(Error::Parameter("dim, heads and window must be >= 1".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        for (l, (&sw, &r)) in self.sub_windows.iter().zip(&self.regions).enumerate() {
            if sw == 0 || r == 0 {
                return Err(Error::Parameter(format!("level {}: zero size", l + 1)));
            }
            if self.window % sw != 0 {
                return Err(Error::Parameter(format!(
                    "level {}: sub-window {} must divide window {}",
                    l + 1,
                    sw,
                    self.window
                )));
            }
        }
        Ok(())
    }

    /// Degenerate single-level config whose candidate region covers any map
    /// of side `side` entirely: one window, unpooled, centered region wide
    /// enough that every token is a candidate exactly once.
    pub fn global_equivalent(dim: usize, heads: usize, side: usize) -> Self {
        FocalConfig {
            dim,
            heads,
            window: side,
            sub_windows: vec![1],
            regions: vec![2 * side - 1],
        }
    }
}

pub struct LevelPlan {
    pub sub: usize,
    pub region: usize,
    pub pooled_h: usize,
    pub pooled_w: usize,
    /// [N, d] tokens -> [np * d, sub^2] pooling columns (row = pooled cell
    /// major, channel minor), multiplied by the level's [sub^2, 1] weights.
    pub pool_gather: Arc<GatherPlan>,
    /// [np, d] pooled tokens -> [windows * region^2, d] candidates, padded
    /// with zeros where the region leaves the map.
    pub key_gather: Arc<GatherPlan>,
    /// (query-local, slot) -> bias table entry, identical for every window.
    pub bias_idx: Arc<Vec<u32>>,
    /// Bias table entries per head (distinct offsets realizable unmasked).
    pub bias_entries: usize,
    /// This level's slot range start in the concatenated candidate axis.
    pub col_off: usize,
}

pub struct FocalPlan {
    pub cfg: FocalConfig,
    pub h: usize,
    pub w: usize,
    pub windows: usize,
    pub tokens: usize,
    pub s_total: usize,
    /// [N, d] -> [windows * window^2, d], window-major.
    pub q_window_gather: Arc<GatherPlan>,
    /// Inverse of `q_window_gather`.
    pub window_reverse: Arc<GatherPlan>,
    /// valid[window * s_total + slot]: candidate lies inside the map.
    pub valid: Arc<Vec<bool>>,
    pub levels: Vec<LevelPlan>,
}

impl FocalPlan {
    pub fn new(h: usize, w: usize, cfg: FocalConfig) -> Result<Self> {
        cfg.validate()?;
        let sw = cfg.window;
        if h == 0 || w == 0 || h % sw != 0 || w % sw != 0 {
            return Err(Error::Parameter(format!(
                "window {} must tile the {}x{} map",
                sw, h, w
            )));
        }
        let d = cfg.dim;
        let (wh, ww) = (h / sw, w / sw);
        let windows = wh * ww;
        let tokens = h * w;
        let sw2 = sw * sw;

        let q_window_gather = Arc::new(GatherPlan::build(&[windows * sw2, d], tokens * d, |j| {
            let c = j % d;
            let row = j / d;
            let (win, q) = (row / sw2, row % sw2);
            let (wr, wc) = (win / ww, win % ww);
            let (qy, qx) = (q / sw, q % sw);
            let t = (wr * sw + qy) * w + (wc * sw + qx);
            Some(t * d + c)
        })?);
        let window_reverse = Arc::new(GatherPlan::build(&[tokens, d], windows * sw2 * d, |j| {
            let c = j % d;
            let t = j / d;
            let (y, x) = (t / w, t % w);
            let win = (y / sw) * ww + x / sw;
            let q = (y % sw) * sw + x % sw;
            Some((win * sw2 + q) * d + c)
        })?);

        let s_total = cfg.attended_tokens();
        let mut valid = vec![false; windows * s_total];
        let mut levels = Vec::with_capacity(cfg.levels());
        let mut col_off = 0;

        for (&sub, &region) in cfg.sub_windows.iter().zip(&cfg.regions) {
            let (ph, pw) = (h / sub, w / sub);
            let np = ph * pw;
            let sub2 = sub * sub;
            let r2 = region * region;

            let pool_gather = Arc::new(GatherPlan::build(&[np * d, sub2], tokens * d, |j| {
                let s = j % sub2;
                let row = j / sub2;
                let (p, c) = (row / d, row % d);
                let (py, px) = (p / pw, p % pw);
                let (iy, ix) = (s / sub, s % sub);
                let t = (py * sub + iy) * w + (px * sub + ix);
                Some(t * d + c)
            })?);

            // region start relative to the window's center token, in cells
            let cell_of = |win: usize| -> (isize, isize) {
                let (wr, wc) = (win / ww, win % ww);
                let ty = wr * sw + (sw - 1) / 2;
                let tx = wc * sw + (sw - 1) / 2;
                ((ty / sub) as isize - ((region - 1) / 2) as isize,
                 (tx / sub) as isize - ((region - 1) / 2) as isize)
            };

            let key_gather = Arc::new(GatherPlan::build(&[windows * r2, d], np * d, |j| {
                let c = j % d;
                let row = j / d;
                let (win, slot) = (row / r2, row % r2);
                let (ry0, rx0) = cell_of(win);
                let (i, k) = (slot / region, slot % region);
                let (y, x) = (ry0 + i as isize, rx0 + k as isize);
                if y >= 0 && x >= 0 && (y as usize) < ph && (x as usize) < pw {
                    Some(((y as usize) * pw + x as usize) * d + c)
                } else {
                    None
                }
            })?);

            // validity per (window, slot) and the offsets realizable unmasked.
            // offset of candidate cell (in fine tokens, cell origin) relative
            // to the query token: window-independent by construction.
            let mut used: std::collections::BTreeMap<(isize, isize), u32> =
                std::collections::BTreeMap::new();
            for win in 0..windows {
                let (ry0, rx0) = cell_of(win);
                for slot in 0..r2 {
                    let (i, k) = (slot / region, slot % region);
                    let (y, x) = (ry0 + i as isize, rx0 + k as isize);
                    let ok = y >= 0 && x >= 0 && (y as usize) < ph && (x as usize) < pw;
                    if ok {
                        valid[win * s_total + col_off + slot] = true;
                    }
                }
            }
            // Offsets in fine tokens between a candidate cell's origin and
            // the query token; window-independent because region placement is
            // fixed relative to the window. A table entry exists only for
            // offsets whose slot is unmasked in at least one window, so every
            // entry receives gradient.
            let base_cell = ((sw - 1) / 2) / sub;
            let start = base_cell as isize - ((region - 1) / 2) as isize;
            let mut any_valid_offset = std::collections::BTreeSet::new();
            for slot in 0..r2 {
                let slot_valid_somewhere =
                    (0..windows).any(|win| valid[win * s_total + col_off + slot]);
                if !slot_valid_somewhere {
                    continue;
                }
                let (i, k) = (slot / region, slot % region);
                for q in 0..sw2 {
                    let (qy, qx) = (q / sw, q % sw);
                    let dy = (start + i as isize) * sub as isize - qy as isize;
                    let dx = (start + k as isize) * sub as isize - qx as isize;
                    any_valid_offset.insert((dy, dx));
                }
            }
            for (n, off) in any_valid_offset.iter().enumerate() {
                used.insert(*off, n as u32);
            }
            let bias_entries = used.len();
            let mut bias_idx = vec![BIAS_PAD; sw2 * r2];
            for q in 0..sw2 {
                let (qy, qx) = (q / sw, q % sw);
                for slot in 0..r2 {
                    let (i, k) = (slot / region, slot % region);
                    let dy = (start + i as isize) * sub as isize - qy as isize;
                    let dx = (start + k as isize) * sub as isize - qx as isize;
                    if let Some(&n) = used.get(&(dy, dx)) {
                        bias_idx[q * r2 + slot] = n;
                    }
                }
            }

            levels.push(LevelPlan {
                sub,
                region,
                pooled_h: ph,
                pooled_w: pw,
                pool_gather,
                key_gather,
                bias_idx: Arc::new(bias_idx),
                bias_entries,
                col_off,
            });
            col_off += r2;
        }

        Ok(FocalPlan {
            cfg,
            h,
            w,
            windows,
            tokens,
            s_total,
            q_window_gather,
            window_reverse,
            valid: Arc::new(valid),
            levels,
        })
    }

    /// Every query row must keep at least one unmasked candidate; true by
    /// construction (the window's own cells are always in-map), asserted in
    /// tests.
    pub fn each_window_has_valid_slot(&self) -> bool {
        (0..self.windows).all(|w| {
            self.valid[w * self.s_total..(w + 1) * self.s_total].iter().any(|&v| v)
        })
    }
}

/// Per-block attention parameters, already bound to a tape.
pub struct AttnVars {
    /// Per level: [sub^2, 1] pooling weights and [1] bias.
    pub pool_w: Vec<Var>,
    pub pool_b: Vec<Var>,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    /// Per level: [heads, entries] relative-offset bias tables.
    pub bias: Vec<Var>,
}

pub struct AttnOut {
    pub out: Var,
    /// Softmax weights [windows * heads * window^2, s_total], for inspection.
    pub attn: Var,
}

fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.bias_add_rows(y, b)
}

/// Focal attention forward over tokens x:[N, d] for the plan's map.
pub fn focal_attention<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    plan: &FocalPlan,
    p: &AttnVars,
) -> Result<AttnOut> {
    let cfg = &plan.cfg;
    let d = cfg.dim;
    let heads = cfg.heads;
    let nw = plan.windows;
    if tape.value(x).shape() != [plan.tokens, d] {
        return Err(Error::dim(
            "focal_attention",
            format!("x {:?} vs plan [{}, {}]", tape.value(x).shape(), plan.tokens, d),
        ));
    }
    if p.pool_w.len() != cfg.levels() || p.bias.len() != cfg.levels() {
        return Err(Error::Parameter("per-level parameter lists must match level count".into()));
    }
    let scale = S::ONE / S::from_f64((cfg.head_dim() as f64).sqrt());

    let mut q_src = None;
    let mut k_ws = Vec::with_capacity(cfg.levels());
    let mut v_ws = Vec::with_capacity(cfg.levels());
    for (l, lp) in plan.levels.iter().enumerate() {
        let np = lp.pooled_h * lp.pooled_w;
        let cols = tape.gather(x, Arc::clone(&lp.pool_gather))?;
        let pooled = tape.matmul(cols, p.pool_w[l])?;
        let pooled = tape.bias_add_rows(pooled, p.pool_b[l])?;
        let pooled = tape.reshape(pooled, &[np, d])?;
        if l == 0 {
            q_src = Some(pooled);
        }
        let k = linear(tape, pooled, p.wk, p.bk)?;
        let v = linear(tape, pooled, p.wv, p.bv)?;
        k_ws.push(tape.gather(k, Arc::clone(&lp.key_gather))?);
        v_ws.push(tape.gather(v, Arc::clone(&lp.key_gather))?);
    }
    let q = linear(tape, q_src.expect("level 1 exists"), p.wq, p.bq)?;
    let q_w = tape.gather(q, Arc::clone(&plan.q_window_gather))?;

    let mut parts = Vec::with_capacity(cfg.levels());
    for k_w in &k_ws {
        parts.push(tape.batched_qk_level(q_w, *k_w, nw, heads, scale)?);
    }
    let mut logits = tape.concat_last(&parts)?;
    for (l, lp) in plan.levels.iter().enumerate() {
        logits = tape.add_level_bias(
            logits,
            p.bias[l],
            nw,
            heads,
            lp.col_off,
            lp.region * lp.region,
            Arc::clone(&lp.bias_idx),
        )?;
    }
    let masked = tape.add_mask_slots(logits, nw, heads, Arc::clone(&plan.valid))?;
    let attn = tape.softmax(masked, 1)?;

    let mut out: Option<Var> = None;
    for (lp, v_w) in plan.levels.iter().zip(&v_ws) {
        let o = tape.attn_apply_level(attn, *v_w, nw, heads, lp.col_off)?;
        out = Some(match out {
            None => o,
            Some(acc) => tape.add(acc, o)?,
        });
    }
    let merged = tape.gather(out.expect("at least one level"), Arc::clone(&plan.window_reverse))?;
    let out = linear(tape, merged, p.wo, p.bo)?;
    Ok(AttnOut { out, attn })
}

/// [d, h, w] map -> [windows, d, s, s] window stack (row-major window order).
pub fn window_partition_plan(d: usize, h: usize, w: usize, s: usize) -> Result<GatherPlan> {
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Parameter(format!("window {} must tile {}x{}", s, h, w)));
    }
    let ww = w / s;
    GatherPlan::build(&[h / s * ww, d, s, s], d * h * w, |j| {
        let xs = j % s;
        let rest = j / s;
        let ys = rest % s;
        let rest = rest / s;
        let c = rest % d;
        let win = rest / d;
        let (wr, wc) = (win / ww, win % ww);
        Some((c * h + wr * s + ys) * w + wc * s + xs)
    })
}

/// Inverse of `window_partition_plan`.
pub fn window_reverse_plan(d: usize, h: usize, w: usize, s: usize) -> Result<GatherPlan> {
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Parameter(format!("window {} must tile {}x{}", s, h, w)));
    }
    let ww = w / s;
    GatherPlan::build(&[d, h, w], h * w * d, |j| {
        let x = j % w;
        let rest = j / w;
        let y = rest % h;
        let c = rest / h;
        let win = (y / s) * ww + x / s;
        Some(((win * d + c) * s + y % s) * s + x % s)
    })
}

/// Token matrix [N, d] -> channel map [d, h, w].
pub fn tokens_to_map_plan(h: usize, w: usize, d: usize) -> Result<GatherPlan> {
    GatherPlan::build(&[d, h, w], h * w * d, |j| {
        let x = j % w;
        let rest = j / w;
        let y = rest % h;
        let c = rest / h;
        Some((y * w + x) * d + c)
    })
}

/// Channel map [d, h, w] -> token matrix [N, d].
pub fn map_to_tokens_plan(d: usize, h: usize, w: usize) -> Result<GatherPlan> {
    GatherPlan::build(&[h * w, d], d * h * w, |j| {
        let c = j % d;
        let t = j / d;
        Some((c * h + t / w) * w + t % w)
    })
}

/// Brute-force multi-head global attention oracle, f64, no shared code with
/// the tape path. x:[n, d] tokens; weights are [d, d], biases [d].
pub mod reference {
    pub struct GlobalWeights<'a> {
        pub wq: &'a [f64],
        pub bq: &'a [f64],
        pub wk: &'a [f64],
        pub bk: &'a [f64],
        pub wv: &'a [f64],
        pub bv: &'a [f64],
        pub wo: &'a [f64],
        pub bo: &'a [f64],
        pub heads: usize,
    }

    fn project(x: &[f64], n: usize, d: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; n * d];
        for t in 0..n {
            for o in 0..d {
                let mut acc = b[o];
                for i in 0..d {
                    acc += x[t * d + i] * w[i * d + o];
                }
                y[t * d + o] = acc;
            }
        }
        y
    }

    pub fn global_attention(x: &[f64], n: usize, d: usize, p: &GlobalWeights) -> Vec<f64> {
        assert_eq!(x.len(), n * d);
        assert_eq!(d % p.heads, 0);
        let hd = d / p.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let q = project(x, n, d, p.wq, p.bq);
        let k = project(x, n, d, p.wk, p.bk);
        let v = project(x, n, d, p.wv, p.bv);
        let mut ctx = vec![0.0; n * d];
        for h in 0..p.heads {
            for t in 0..n {
                let mut logits = vec![0.0; n];
                for u in 0..n {
                    let mut acc = 0.0;
                    for c in 0..hd {
                        acc += q[t * d + h * hd + c] * k[u * d + h * hd + c];
                    }
                    logits[u] = acc * scale;
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut den = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - mx).exp();
                    den += *l;
                }
                for u in 0..n {
                    let wgt = logits[u] / den;
                    for c in 0..hd {
                        ctx[t * d + h * hd + c] += wgt * v[u * d + h * hd + c];
                    }
                }
            }
        }
        project(&ctx, n, d, p.wo, p.bo)
    }
}
