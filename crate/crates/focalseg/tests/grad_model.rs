//! The composed-network gradient check: all parameters and the input of the
//! smallest full model against central differences, through both heads.

use focalseg::gradcheck;

#[test]
fn composed_model_gradients_match_central_differences() {
    for seed in [0, 1] {
        let report = gradcheck::composed_model_check(seed, Some(2)).unwrap();
        assert!(
            report.ok(1e-4),
            "seed {}: max_rel {:.3e}, worst {:?}",
            seed,
            report.max_rel,
            report.worst
        );
        assert!(report.checked > 200, "subsampling should still touch every tensor");
    }
}
