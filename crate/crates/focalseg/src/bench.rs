//! Wall-time and memory comparison of windowed multi-granularity attention
//! against dense global attention.
//!
//! Both routes run through the same tape kernels so the measured ratio
//! reflects candidate-set size, not implementation differences: the global
//! route is the degenerate single-window configuration whose candidate
//! region covers the whole map, cross-checked in f64 against a direct
//! dense-attention computation at the smallest map size.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::attention::{focal_attention, reference, AttnVars, FocalConfig, FocalPlan};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub dim: usize,
    pub heads: usize,
    /// Query window side for the windowed route.
    pub window: usize,
    /// Timed forwards per route and size; the median is reported.
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { dim: 32, heads: 2, window: 7, reps: 20, seed: 17 }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub side: usize,
    pub tokens: usize,
    /// Candidate slots per query on the windowed route; constant in `side`.
    pub focal_attended: usize,
    /// Tokens attended per query under dense attention: all of them.
    pub global_attended: usize,
    pub focal_ms: f64,
    pub global_ms: f64,
    pub focal_peak_bytes: usize,
    pub global_peak_bytes: usize,
}

impl BenchRow {
    pub fn wall_ratio(&self) -> f64 {
        self.global_ms / self.focal_ms
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Max |focal - dense| from the f64 cross-check at the smallest size.
    pub crosscheck_max_abs: f64,
    pub reps: usize,
}

/// Cross-check tolerance: the degenerate route must reproduce dense
/// attention to f64 round-off before any timing is trusted.
pub const CROSSCHECK_TOL: f64 = 1e-6;

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(
            "side,tokens,focal_attended,global_attended,focal_fwd_ms,global_fwd_ms,wall_ratio,focal_peak_bytes,global_peak_bytes\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.3},{:.3},{:.2},{},{}\n",
                r.side,
                r.tokens,
                r.focal_attended,
                r.global_attended,
                r.focal_ms,
                r.global_ms,
                r.wall_ratio(),
                r.focal_peak_bytes,
                r.global_peak_bytes
            ));
        }
        s
    }
}

fn uniform<S: Scalar>(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::from_f64(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

/// Mean pooling, zero tables, random projections: the values a forward pass
/// actually exercises, and (with the zero tables) exactly the weights under
/// which the degenerate configuration equals dense attention.
fn plan_vars<S: Scalar>(tp: &mut Tape<S>, plan: &FocalPlan, rng: &mut ChaCha12Rng) -> AttnVars {
    let d = plan.cfg.dim;
    let heads = plan.cfg.heads;
    let mut pool_w = Vec::new();
    let mut pool_b = Vec::new();
    let mut bias = Vec::new();
    for lp in &plan.levels {
        let s2 = lp.sub * lp.sub;
        let w = S::from_f64(1.0 / s2 as f64);
        pool_w.push(tp.constant(Tensor::new(&[s2, 1], vec![w; s2]).expect("pool shape")));
        pool_b.push(tp.constant(Tensor::zeros(&[1])));
        bias.push(tp.constant(Tensor::zeros(&[heads, lp.bias_entries])));
    }
    AttnVars {
        pool_w,
        pool_b,
        wq: tp.constant(uniform(rng, &[d, d], -0.5, 0.5)),
        bq: tp.constant(uniform(rng, &[d], -0.5, 0.5)),
        wk: tp.constant(uniform(rng, &[d, d], -0.5, 0.5)),
        bk: tp.constant(uniform(rng, &[d], -0.5, 0.5)),
        wv: tp.constant(uniform(rng, &[d, d], -0.5, 0.5)),
        bv: tp.constant(uniform(rng, &[d], -0.5, 0.5)),
        wo: tp.constant(uniform(rng, &[d, d], -0.5, 0.5)),
        bo: tp.constant(uniform(rng, &[d], -0.5, 0.5)),
        bias,
    }
}

/// Median forward wall time in ms plus tape peak bytes for one route.
/// Each repetition rebuilds the tape from scratch; one untimed warm-up
/// absorbs first-touch page faults.
fn time_route(side: usize, cfg: FocalConfig, reps: usize, seed: u64) -> Result<(f64, usize)> {
    let plan = Arc::new(FocalPlan::new(side, side, cfg)?);
    let n = side * side;
    let d = plan.cfg.dim;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let xt: Tensor<f32> = uniform(&mut rng, &[n, d], -1.0, 1.0);

    let mut peak = 0usize;
    let mut times = Vec::with_capacity(reps);
    for rep in 0..reps + 1 {
        let mut tp = Tape::<f32>::new();
        let x = tp.constant(xt.clone());
        let vars = plan_vars(&mut tp, &plan, &mut rng);
        let t0 = Instant::now();
        let out = focal_attention(&mut tp, x, &plan, &vars)?;
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        // keep the output alive past the clock read
        let _ = tp.value(out.out);
        peak = peak.max(tp.peak_bytes());
        if rep > 0 {
            times.push(dt);
        }
    }
    Ok((median(&mut times), peak))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// f64 check that the degenerate configuration reproduces dense attention:
/// returns the max abs output difference, erring above `CROSSCHECK_TOL`.
pub fn crosscheck(side: usize, dim: usize, heads: usize, seed: u64) -> Result<f64> {
    let n = side * side;
    let cfg = FocalConfig::global_equivalent(dim, heads, side);
    let plan = FocalPlan::new(side, side, cfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut tp = Tape::<f64>::new();
    let xt: Tensor<f64> = uniform(&mut rng, &[n, dim], -0.8, 0.8);
    let x = tp.constant(xt.clone());
    let vars = plan_vars(&mut tp, &plan, &mut rng);
    let got = focal_attention(&mut tp, x, &plan, &vars)?;

    let grab = |v| tp.value(v).data().to_vec();
    let weights = reference::GlobalWeights {
        wq: &grab(vars.wq),
        bq: &grab(vars.bq),
        wk: &grab(vars.wk),
        bk: &grab(vars.bk),
        wv: &grab(vars.wv),
        bv: &grab(vars.bv),
        wo: &grab(vars.wo),
        bo: &grab(vars.bo),
        heads,
    };
    let want = reference::global_attention(xt.data(), n, dim, &weights);
    let max_abs = tp
        .value(got.out)
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if max_abs > CROSSCHECK_TOL {
        return Err(Error::Invariant(format!(
            "degenerate route differs from dense attention by {max_abs:.3e} at side {side}"
        )));
    }
    Ok(max_abs)
}

/// Times one forward per route at each map side. Sides must be multiples of
/// the query window so the windowed route tiles exactly.
pub fn run(sides: &[usize], cfg: &BenchConfig) -> Result<BenchReport> {
    if sides.is_empty() {
        return Err(Error::Parameter("need at least one map side".into()));
    }
    if cfg.reps == 0 {
        return Err(Error::Parameter("reps must be >= 1".into()));
    }
    for &side in sides {
        if side == 0 || side % cfg.window != 0 {
            return Err(Error::Parameter(format!(
                "map side {side} is not a multiple of window {}",
                cfg.window
            )));
        }
    }
    let smallest = *sides.iter().min().expect("non-empty");
    let crosscheck_max_abs = crosscheck(smallest, cfg.dim, cfg.heads, cfg.seed)?;

    let mut rows = Vec::with_capacity(sides.len());
    for (i, &side) in sides.iter().enumerate() {
        let focal = FocalConfig {
            dim: cfg.dim,
            heads: cfg.heads,
            window: cfg.window,
            sub_windows: vec![1, cfg.window],
            regions: vec![cfg.window, 3],
        };
        let focal_attended = focal.attended_tokens();
        let global = FocalConfig::global_equivalent(cfg.dim, cfg.heads, side);
        let (focal_ms, focal_peak) = time_route(side, focal, cfg.reps, cfg.seed ^ i as u64)?;
        let (global_ms, global_peak) =
            time_route(side, global, cfg.reps, cfg.seed ^ (i as u64) << 8)?;
        rows.push(BenchRow {
            side,
            tokens: side * side,
            focal_attended,
            global_attended: side * side,
            focal_ms,
            global_ms,
            focal_peak_bytes: focal_peak,
            global_peak_bytes: global_peak,
        });
    }
    Ok(BenchReport { rows, crosscheck_max_abs, reps: cfg.reps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchConfig {
        BenchConfig { dim: 8, heads: 2, window: 4, reps: 3, seed: 11 }
    }

    #[test]
    fn attended_counts_follow_the_routes() {
        let report = run(&[4, 8], &tiny()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.crosscheck_max_abs <= CROSSCHECK_TOL);
        // windowed candidate count does not depend on the map
        assert_eq!(report.rows[0].focal_attended, report.rows[1].focal_attended);
        for (row, side) in report.rows.iter().zip([4usize, 8]) {
            assert_eq!(row.tokens, side * side);
            assert_eq!(row.global_attended, row.tokens);
            assert!(row.focal_ms > 0.0 && row.global_ms > 0.0);
            assert!(row.focal_peak_bytes > 0 && row.global_peak_bytes > 0);
        }
    }

    #[test]
    fn csv_is_one_header_plus_one_line_per_size() {
        let report = run(&[4], &tiny()).unwrap();
        let csv = report.csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 9);
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields.len(), 9);
        assert_eq!(fields[0], "4");
        for f in &fields[1..] {
            f.parse::<f64>().expect("numeric field");
        }
    }

    #[test]
    fn indivisible_side_is_rejected() {
        let err = run(&[6], &tiny()).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn median_of_odd_and_even_runs() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
