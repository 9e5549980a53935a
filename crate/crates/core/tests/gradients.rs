//! Central finite-difference checks (h = 1e-4, relative error < 1e-4).
#![cfg(not(feature = "f32"))]

use caga::caga::{CaaConfig, CagaConfig};
use caga::gradcheck::{op_suite, GradCheck};
use caga::selftest::{block_gradcheck, model_gradcheck, small_model_config};
use caga::tensor::Real;

const TOL: Real = 1e-4;

#[test]
fn every_tape_op_on_random_shapes() {
    let gc = GradCheck::default();
    let mut ops = std::collections::BTreeSet::new();
    for seed in 0..4 {
        for case in op_suite(seed, 16) {
            let r = gc.run(&case.inputs, &case.f).unwrap();
            assert!(r.max_rel_error < TOL, "{} (seed {seed}): {:.3e}", case.op, r.max_rel_error);
            ops.insert(case.op);
        }
    }
    assert_eq!(ops.len(), caga::selftest::FAULTABLE_OPS.len());
}

#[test]
fn caga_block_all_parameters() {
    let cfg = CagaConfig {
        num_heads: 2,
        caa: CaaConfig {
            head_dim: 4,
            d_qkv: 3,
            dilations: vec![1, 2, 3],
            ..CaaConfig::default()
        },
        cascade_heads: true,
    };
    let gc = GradCheck {
        max_per_input: Some(24),
        ..GradCheck::default()
    };
    let r = block_gradcheck(&cfg, 5, 9, &gc).unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn caga_block_without_cascades() {
    let mut cfg = CagaConfig {
        num_heads: 2,
        caa: CaaConfig {
            head_dim: 3,
            d_qkv: 2,
            dilations: vec![1, 2],
            ..CaaConfig::default()
        },
        cascade_heads: false,
    };
    cfg.caa.cascade_dilations = false;
    let r = block_gradcheck(&cfg, 4, 8, &GradCheck::default()).unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn end_to_end_model_at_16x16() {
    let gc = GradCheck {
        max_per_input: Some(256),
        ..GradCheck::default()
    };
    let r = model_gradcheck(&small_model_config(), &gc).unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn broken_backward_rule_is_caught() {
    for op in ["conv2d", "softmax", "interpolate", "batchnorm"] {
        let gc = GradCheck {
            fault: Some(op),
            ..GradCheck::default()
        };
        let case = op_suite(1, 8).into_iter().find(|c| c.op == op).unwrap();
        let r = gc.run(&case.inputs, &case.f).unwrap();
        assert!(r.max_rel_error > TOL, "{op} fault went unnoticed");
    }
}
