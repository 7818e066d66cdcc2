mod common;

use common::{gradcheck_model, gradcheck_ops};

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..10 {
        for (op, err) in gradcheck_ops(seed) {
            assert!(err < 1e-3, "{op} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn two_layer_model_matches_central_differences() {
    for seed in 0..10 {
        let err = gradcheck_model(seed, 12);
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
    }
}
