//! Kernels against brute-force loop references.

mod common;

use caga::caga::{scaled_dot_attention, scaled_dot_attention_weights, AttentionTriple};
use caga::nn::{conv2d, depthwise_separable_conv, dilated_output_extent, ConvSpec};
use caga::tape::Tape;
use caga::tensor::{Real, Tensor};
use common::{rand_tensor, rng, ConvCase};
use proptest::prelude::*;
use rand::Rng;

const TOL: Real = 1e-6;

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for _ in 0..50 {
        let (m, k, n) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..9));
        let a = rand_tensor(&[m, k], &mut r);
        let b = rand_tensor(&[k, n], &mut r);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let want = common::matmul(a.data(), b.data(), m, k, n);
        assert!(common::max_abs_diff(tape.value(c).data(), &want) < TOL);
    }
}

#[test]
fn conv2d_matches_loop_for_dilations_one_to_three() {
    let mut r = rng(2);
    let mut per_dilation = [0usize; 3];
    for case in 0..90 {
        let dilation = 1 + case % 3;
        let groups = [1, 2, 3][r.gen_range(0..3)];
        let k = [1, 2, 3, 5][r.gen_range(0..4)];
        let padding = r.gen_range(0..3);
        let c = ConvCase {
            batch: r.gen_range(1..3),
            cin: groups * r.gen_range(1..3),
            cout: groups * r.gen_range(1..3),
            groups,
            h: 0,
            w: 0,
            k,
            stride: r.gen_range(1..3),
            dilation,
            padding,
        };
        let min = c.k_eff().saturating_sub(2 * padding).max(1);
        let c = ConvCase {
            h: min + r.gen_range(0..6),
            w: min + r.gen_range(0..6),
            ..c
        };
        let x = rand_tensor(&[c.batch, c.cin, c.h, c.w], &mut r);
        let w = rand_tensor(&[c.cout, c.cin / groups, k, k], &mut r);
        let b = rand_tensor(&[c.cout], &mut r);
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape
            .conv2d(vx, vw, Some(vb), c.stride, c.dilation, c.padding, groups)
            .unwrap();
        let (want, _) = common::conv(&c, x.data(), w.data(), Some(b.data()));
        assert_eq!(tape.value(y).shape(), &[c.batch, c.cout, c.out_extent(c.h), c.out_extent(c.w)]);
        let diff = common::max_abs_diff(tape.value(y).data(), &want);
        assert!(diff < TOL, "case {case}: diff {diff}");
        per_dilation[dilation - 1] += 1;
    }
    assert!(per_dilation.iter().all(|&n| n >= 30));
}

#[test]
fn conv_spec_path_and_mac_count_match_loop() {
    let mut r = rng(3);
    for case in 0..60 {
        let d = 1 + case % 3;
        let k = [1, 3, 5][(case / 3) % 3];
        let same = case % 2 == 0 && (k - 1) * d % 2 == 0;
        let mut spec = ConvSpec::new(r.gen_range(1..4), r.gen_range(1..4), k)
            .dilation(d)
            .stride(1 + case % 2);
        if same {
            spec = spec.same();
        }
        let pad = spec.pad().unwrap();
        let keff = (k - 1) * d + 1;
        let (h, w) = (keff + r.gen_range(0..5), keff + r.gen_range(0..5));
        let c = ConvCase {
            batch: 1,
            cin: spec.in_channels,
            cout: spec.out_channels,
            groups: 1,
            h,
            w,
            k,
            stride: spec.stride,
            dilation: d,
            padding: pad,
        };
        let x = rand_tensor(&[1, c.cin, h, w], &mut r);
        let wt = rand_tensor(&[c.cout, c.cin, k, k], &mut r);
        let b = rand_tensor(&[c.cout], &mut r);
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = conv2d(&mut tape, vx, &spec, vw, Some(vb)).unwrap();
        let (want, iters) = common::conv(&c, x.data(), wt.data(), Some(b.data()));
        assert!(common::max_abs_diff(tape.value(y).data(), &want) < TOL);
        assert_eq!(spec.macs(h, w).unwrap(), iters, "case {case}");
    }
}

#[test]
fn attention_matches_loop() {
    let mut r = rng(4);
    for _ in 0..60 {
        let (d, s) = (r.gen_range(1..10), r.gen_range(1..20));
        let [q, k, v] = [(); 3].map(|_| rand_tensor(&[d, s], &mut r).map(|x| 3.0 * x));
        let mut tape = Tape::new();
        let t = AttentionTriple {
            q: tape.constant(q.clone()),
            k: tape.constant(k.clone()),
            v: tape.constant(v.clone()),
        };
        let (out, weights) = scaled_dot_attention_weights(&mut tape, &t).unwrap();
        let (want, want_a) = common::attention(q.data(), k.data(), v.data(), d, s);
        assert!(common::max_abs_diff(tape.value(out).data(), &want) < TOL);
        assert!(common::max_abs_diff(tape.value(weights).data(), &want_a) < TOL);
    }
}

#[test]
fn batched_attention_matches_per_sample_loop() {
    let mut r = rng(5);
    for _ in 0..10 {
        let (b, d, s) = (3, r.gen_range(1..6), r.gen_range(1..12));
        let [q, k, v] = [(); 3].map(|_| rand_tensor(&[b, d, s], &mut r));
        let mut tape = Tape::new();
        let t = AttentionTriple {
            q: tape.constant(q.clone()),
            k: tape.constant(k.clone()),
            v: tape.constant(v.clone()),
        };
        let out = scaled_dot_attention(&mut tape, &t).unwrap();
        for n in 0..b {
            let sl = |t: &Tensor| t.data()[n * d * s..(n + 1) * d * s].to_vec();
            let (want, _) = common::attention(&sl(&q), &sl(&k), &sl(&v), d, s);
            assert!(common::max_abs_diff(&sl(tape.value(out)), &want) < TOL);
        }
    }
}

#[test]
fn dsconv_matches_two_loop_convolutions() {
    let mut r = rng(6);
    for _ in 0..50 {
        let cin = r.gen_range(1..5);
        let cout = r.gen_range(1..6);
        let k = [1, 3, 5][r.gen_range(0..3)];
        let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
        let dw_spec = ConvSpec::depthwise(cin, k);
        let pw_spec = ConvSpec::new(cin, cout, 1);
        let x = rand_tensor(&[2, cin, h, w], &mut r);
        let dw = rand_tensor(&[cin, 1, k, k], &mut r);
        let dwb = rand_tensor(&[cin], &mut r);
        let pw = rand_tensor(&[cout, cin, 1, 1], &mut r);
        let pwb = rand_tensor(&[cout], &mut r);
        let mut tape = Tape::new();
        let vars = [&x, &dw, &dwb, &pw, &pwb].map(|t| tape.constant(t.clone()));
        let y = depthwise_separable_conv(&mut tape, vars[0], &dw_spec, vars[1], Some(vars[2]), &pw_spec, vars[3], Some(vars[4]))
            .unwrap();
        let c1 = ConvCase {
            batch: 2,
            cin,
            cout: cin,
            groups: cin,
            h,
            w,
            k,
            stride: 1,
            dilation: 1,
            padding: (k - 1) / 2,
        };
        let (mid, _) = common::conv(&c1, x.data(), dw.data(), Some(dwb.data()));
        let c2 = ConvCase {
            cout,
            groups: 1,
            k: 1,
            padding: 0,
            ..c1
        };
        let (want, _) = common::conv(&c2, &mid, pw.data(), Some(pwb.data()));
        assert!(common::max_abs_diff(tape.value(y).data(), &want) < TOL);
    }
}

#[test]
fn valid_extent_equals_placement_enumeration() {
    for k in [1, 3, 5] {
        for d in [1, 2, 3] {
            for s in [1, 2] {
                for extent in 1..=24 {
                    let keff = k + (k - 1) * (d - 1);
                    let placements = (0..)
                        .map(|p| p * s)
                        .take_while(|&start| start + keff <= extent)
                        .count();
                    match dilated_output_extent(extent, k, d, s) {
                        Ok(e) => assert_eq!(e, placements, "k={k} d={d} s={s} H={extent}"),
                        Err(_) => assert_eq!(placements, 0, "k={k} d={d} s={s} H={extent}"),
                    }
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn attention_weights_are_row_stochastic(d in 1usize..6, s in 1usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let [q, k, v] = [(); 3].map(|_| rand_tensor(&[d, s], &mut r));
        let mut tape = Tape::new();
        let t = AttentionTriple { q: tape.constant(q), k: tape.constant(k), v: tape.constant(v) };
        let (_, a) = scaled_dot_attention_weights(&mut tape, &t).unwrap();
        for row in tape.value(a).data().chunks(s) {
            prop_assert!((row.iter().sum::<Real>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}
