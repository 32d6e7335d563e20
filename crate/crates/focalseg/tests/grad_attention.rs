//! End-to-end gradient check of windowed multi-level attention: pooling,
//! projections, candidate gathers, bias, masking, softmax, value mixing and
//! the output projection all in one graph.

use std::sync::Arc;

use focalseg::attention::{focal_attention, AttnVars, FocalConfig, FocalPlan};
use focalseg::gradcheck::{self, signed};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

const TOL: f64 = 1e-4;

fn run_case(cfg: FocalConfig, side: usize, seed: u64) {
    let plan = Arc::new(FocalPlan::new(side, side, cfg.clone()).unwrap());
    let (n, d, heads) = (side * side, cfg.dim, cfg.heads);
    let levels = cfg.sub_windows.len();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut inputs = vec![signed(&[n, d], &mut rng)];
    for &sub in &cfg.sub_windows {
        inputs.push(signed(&[sub * sub, 1], &mut rng));
    }
    for _ in 0..levels {
        inputs.push(signed(&[1], &mut rng));
    }
    for _ in 0..4 {
        inputs.push(signed(&[d, d], &mut rng));
        inputs.push(signed(&[d], &mut rng));
    }
    for lp in &plan.levels {
        inputs.push(signed(&[heads, lp.bias_entries], &mut rng));
    }

    let plan2 = Arc::clone(&plan);
    let report = gradcheck::check(
        &inputs,
        move |tp, vars| {
            let mut it = vars.iter().copied();
            let x = it.next().unwrap();
            let pool_w: Vec<_> = (0..levels).map(|_| it.next().unwrap()).collect();
            let pool_b: Vec<_> = (0..levels).map(|_| it.next().unwrap()).collect();
            let wq = it.next().unwrap();
            let bq = it.next().unwrap();
            let wk = it.next().unwrap();
            let bk = it.next().unwrap();
            let wv = it.next().unwrap();
            let bv = it.next().unwrap();
            let wo = it.next().unwrap();
            let bo = it.next().unwrap();
            let bias: Vec<_> = (0..levels).map(|_| it.next().unwrap()).collect();
            let vars = AttnVars {
                pool_w,
                pool_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                bias,
            };
            let out = focal_attention(tp, x, &plan2, &vars)?;
            gradcheck::weighted_sum(tp, out.out)
        },
        Some(24),
        seed,
    )
    .unwrap();
    assert!(
        report.ok(TOL),
        "attention gradcheck failed (side {}): max_rel {:.3e} worst {:?}",
        side,
        report.max_rel,
        report.worst
    );
}

#[test]
fn two_level_attention_gradients_match_central_differences() {
    let cfg = FocalConfig {
        dim: 6,
        heads: 2,
        window: 4,
        sub_windows: vec![1, 4],
        regions: vec![4, 3],
    };
    for seed in 0..2 {
        run_case(cfg.clone(), 8, seed);
    }
}

#[test]
fn degenerate_global_attention_gradients_match_central_differences() {
    let cfg = FocalConfig::global_equivalent(4, 2, 4);
    run_case(cfg, 4, 7);
}
