//! Built-in verification suite: gradient checks, loop-oracle equivalence
//! and structural invariants, at least one per module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::caga::{caga_param_count, scaled_dot_attention, AttentionTriple, CaaConfig, CagaBlock, CagaConfig};
use crate::config::RunConfig;
use crate::data::{augment, fit_zscore, ppm, synth_dataset, Dataset, Sample};
use crate::error::Error;
use crate::gradcheck::{op_suite, GradCheck};
use crate::interpret::{cam_from_maps, normalize_heatmap};
use crate::model::{Model, ModelConfig, StemStage};
use crate::nn::{dilated_output_extent, init_rng, ConvSpec, Ctx, DsConv, ParamStore};
use crate::oracle;
use crate::profile::dense_conv_params;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};
use crate::train::{
    adamw_step, compute_metrics, focal_loss, kfold_split, lr_at_epoch, AdamState, AdamWParams, FocalLossConfig,
};
use crate::{tnsr, Result as CoreResult};

/// Tape ops whose backward rule can be deliberately broken.
pub const FAULTABLE_OPS: [&str; 26] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "add_along",
    "mul_along",
    "matmul",
    "softmax",
    "log_softmax",
    "reshape",
    "permute",
    "concat",
    "slice",
    "sum",
    "mean",
    "sum_axis",
    "mean_axis",
    "log",
    "exp",
    "pow",
    "relu",
    "gather",
    "conv2d",
    "batchnorm",
    "interpolate",
];

pub fn fault_op(name: &str) -> Option<&'static str> {
    FAULTABLE_OPS.iter().copied().find(|&op| op == name)
}

pub const GRAD_TOL: Real = 1e-4;
pub const ORACLE_TOL: Real = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

type Outcome = std::result::Result<String, String>;

fn grad_outcome(r: CoreResult<crate::gradcheck::GradCheckReport>) -> Outcome {
    let r = r.map_err(|e| e.to_string())?;
    let msg = format!("max rel err {:.2e} over {} entries", r.max_rel_error, r.checked);
    if r.max_rel_error < GRAD_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn close(got: &Tensor, want: &Tensor, tol: Real, what: &str) -> Outcome {
    if got.shape() != want.shape() {
        return Err(format!("{what}: shape {:?} vs {:?}", got.shape(), want.shape()));
    }
    let d = got.max_abs_diff(want);
    if d <= tol {
        Ok(format!("max abs diff {d:.2e}"))
    } else {
        Err(format!("{what}: max abs diff {d:.2e} > {tol:e}"))
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Outcome {
    let msg = msg.into();
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

/// Checks a CAGA block against finite differences with respect to its
/// input and every parameter.
pub fn block_gradcheck(cfg: &CagaConfig, in_channels: usize, extent: usize, gc: &GradCheck) -> CoreResult<crate::gradcheck::GradCheckReport> {
    let block = CagaBlock::new("b", in_channels, cfg.clone())?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut init_rng(5));
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut inputs = vec![Tensor::uniform(&[2, in_channels, extent, extent], -1.0, 1.0, &mut init_rng(6))];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    gc.run(&inputs, |tape, v| {
        let t = std::mem::replace(tape, Tape::new());
        let mut ctx = Ctx::with_tape(t, &store, true, true);
        for (name, &var) in names.iter().zip(&v[1..]) {
            ctx.bind(name, var);
        }
        let out = block.forward(&mut ctx, v[0]);
        *tape = std::mem::replace(&mut ctx.tape, Tape::new());
        out
    })
}

/// Model configuration for the end-to-end check at 16×16.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        image_size: (16, 16),
        stem: vec![
            StemStage { out_channels: 8, stride: 2 },
            StemStage { out_channels: 48, stride: 1 },
        ],
        ..ModelConfig::default()
    }
}

pub fn model_gradcheck(cfg: &ModelConfig, gc: &GradCheck) -> CoreResult<crate::gradcheck::GradCheckReport> {
    let model = Model::new(cfg.clone())?;
    let store = model.init(3);
    let (h, w) = cfg.image_size;
    let images = Tensor::uniform(&[2, 3, h, w], -1.0, 1.0, &mut init_rng(4));
    gc.run(&[images], |tape, v| {
        let t = std::mem::replace(tape, Tape::new());
        let mut ctx = Ctx::with_tape(t, &store, true, true);
        let out = model.forward(&mut ctx, v[0]);
        *tape = std::mem::replace(&mut ctx.tape, Tape::new());
        Ok(out?.logits)
    })
}

fn small_caga() -> CagaConfig {
    CagaConfig {
        num_heads: 2,
        caa: CaaConfig {
            head_dim: 4,
            d_qkv: 2,
            dilations: vec![1, 2],
            ..CaaConfig::default()
        },
        cascade_heads: true,
    }
}

fn conv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: Real = 0.0;
    for case in 0..12 {
        let d = 1 + case % 3;
        let groups = if case % 2 == 0 { 1 } else { 2 };
        let (cin, cout) = (2 * groups, 2 * groups);
        let k = [1, 3, 5][case % 3];
        let k_eff = k + (k - 1) * (d - 1);
        let h = k_eff + 2 + case % 4;
        let x = Tensor::uniform(&[2, cin, h, h + 1], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[cout, cin / groups, k, k], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[cout], -1.0, 1.0, &mut rng);
        let stride = 1 + case % 2;
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(vx, vw, Some(vb), stride, d, 0, groups).map_err(e2s)?;
        let (want, macs) = oracle::conv2d(&x, &w, Some(&b), stride, d, 0, groups);
        close(tape.value(y), &want, ORACLE_TOL, "conv2d")?;
        let spec = ConvSpec::new(cin, cout, k).dilation(d).stride(stride);
        let spec = ConvSpec { groups, ..spec };
        let counted = 2 * spec.macs(h, h + 1).map_err(e2s)?;
        ensure(counted == macs, format!("MAC count {counted} vs oracle loop {macs}"))?;
        worst = worst.max(tape.value(y).max_abs_diff(&want));
    }
    Ok(format!("12 cases, max abs diff {worst:.2e}"))
}

fn shape_law() -> Outcome {
    let mut n = 0;
    for k in [1, 3, 5] {
        for d in [1, 2, 3] {
            for s in [1, 2] {
                for extent in 1..20 {
                    let k_eff = k + (k - 1) * (d - 1);
                    let placements = (0..extent).step_by(s).filter(|&p| p + k_eff <= extent).count();
                    match dilated_output_extent(extent, k, d, s) {
                        Ok(e) => ensure(e == placements, format!("k={k} d={d} s={s} H={extent}: {e} vs {placements}"))?,
                        Err(_) => ensure(placements == 0, format!("k={k} d={d} s={s} H={extent} rejected"))?,
                    };
                    n += 1;
                }
            }
        }
    }
    Ok(format!("{n} (k, d, s, H) combinations"))
}

fn dsconv_oracle() -> Outcome {
    let layer = DsConv::new("ds", 4, 6, 3);
    let mut store = ParamStore::new();
    layer.init(&mut store, &mut init_rng(8));
    for name in ["ds.dw.bias", "ds.pw.bias"] {
        let t = store.get_mut(name).map_err(e2s)?;
        *t = t.map(|_| 0.1);
    }
    let x = Tensor::uniform(&[2, 4, 7, 6], -1.0, 1.0, &mut init_rng(9));
    let mut ctx = Ctx::eval(&store);
    let vx = ctx.input(x.clone());
    let y = layer.forward(&mut ctx, vx).map_err(e2s)?;
    let g = |n: &str| store.get(n).cloned().map_err(e2s);
    let want = oracle::dsconv(&x, &g("ds.dw.weight")?, &g("ds.dw.bias")?, &g("ds.pw.weight")?, &g("ds.pw.bias")?);
    close(ctx.tape.value(y), &want, ORACLE_TOL, "dsconv")
}

fn attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (d, s) in [(2, 3), (4, 9), (8, 16)] {
        let [q, k, v] = [(); 3].map(|_| Tensor::uniform(&[d, s], -2.0, 2.0, &mut rng));
        let mut tape = Tape::new();
        let t = AttentionTriple {
            q: tape.constant(q.clone()),
            k: tape.constant(k.clone()),
            v: tape.constant(v.clone()),
        };
        let y = scaled_dot_attention(&mut tape, &t).map_err(e2s)?;
        close(tape.value(y), &oracle::attention(&q, &k, &v), ORACLE_TOL, "attention")?;
    }
    Ok("3 shapes within 1e-6".into())
}

fn single_head_identity() -> Outcome {
    let cfg = CagaConfig {
        num_heads: 1,
        ..small_caga()
    };
    let block = CagaBlock::new("b", 4, cfg).map_err(e2s)?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut init_rng(12));
    let x = Tensor::uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut init_rng(13));
    let mut ctx = Ctx::eval(&store);
    let vx = ctx.input(x);
    let y = block.cga_forward(&mut ctx, vx).map_err(e2s)?;
    let head = block.heads[0].forward(&mut ctx, vx).map_err(e2s)?;
    let p = block.proj.forward(&mut ctx, head).map_err(e2s)?;
    let want = ctx.tape.add(vx, p).map_err(e2s)?;
    ensure(
        ctx.tape.value(y) == ctx.tape.value(want),
        "n=1 cascaded group attention equals x + Proj(CAA(x)) exactly",
    )
}

fn param_closed_form() -> Outcome {
    for cascade in [false, true] {
        let mut cfg = CagaConfig::default();
        cfg.caa.cascade_dilations = cascade;
        let block = CagaBlock::new("b", 32, cfg.clone()).map_err(e2s)?;
        let mut store = ParamStore::new();
        block.init(&mut store, &mut init_rng(1));
        let closed = caga_param_count(&cfg, 32).map_err(e2s)?;
        ensure(
            closed == store.num_scalars() && closed == block.param_count(),
            format!("closed form {closed} vs enumerated {}", store.num_scalars()),
        )?;
    }
    Ok("closed form equals enumeration with and without dilation cascade".into())
}

fn model_shape() -> Outcome {
    let model = Model::new(ModelConfig::default()).map_err(e2s)?;
    let store = model.init(82);
    let logits = model.logits(&store, &Tensor::zeros(&[2, 3, 32, 32])).map_err(e2s)?;
    ensure(logits.shape() == [2, 4], format!("logits shape {:?}", logits.shape()))
}

fn focal_ce() -> Outcome {
    let logits = Tensor::uniform(&[5, 4], -3.0, 3.0, &mut init_rng(40));
    let targets = [0, 3, 1, 2, 3];
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let cfg = FocalLossConfig {
        gamma: 0.0,
        alpha: vec![1.0; 4],
    };
    let loss = focal_loss(&mut tape, l, &targets, &cfg).map_err(e2s)?;
    let got = tape.value(loss).item();
    let mut want = 0.0;
    for (row, &t) in logits.data().chunks(4).zip(&targets) {
        let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<Real>().ln();
        want += lse - row[t];
    }
    want /= 5.0;
    ensure((got - want).abs() < 1e-9, format!("focal(γ=0) {got} vs cross-entropy {want}"))
}

fn adamw_reference() -> Outcome {
    let hp = AdamWParams {
        lr: 0.1,
        weight_decay: 0.01,
        ..AdamWParams::default()
    };
    let (p0, g) = (0.7, 0.3);
    let mut p = [p0];
    let mut st = AdamState::new(1);
    adamw_step(&mut p, &[g], &mut st, &hp);
    let decayed = p0 - hp.lr * hp.weight_decay * p0;
    let m = (1.0 - hp.beta1) * g / (1.0 - hp.beta1);
    let v = (1.0 - hp.beta2) * g * g / (1.0 - hp.beta2);
    let want = decayed - hp.lr * m / (v.sqrt() + hp.eps);
    ensure((p[0] - want).abs() < 1e-12, format!("{} vs reference {want}", p[0]))?;
    ensure(lr_at_epoch(1e-5, 0.95, 2) == 1e-5 * 0.95 * 0.95, "lr schedule")
}

fn kfold_sizes() -> Outcome {
    let labels: Vec<usize> = (0..400).map(|i| i / 100).collect();
    let folds = kfold_split(400, 10, 82, Some(&labels)).map_err(e2s)?;
    for f in &folds {
        ensure(
            (f.train.len(), f.val.len(), f.test.len()) == (288, 72, 40),
            format!("fold sizes {}/{}/{}", f.train.len(), f.val.len(), f.test.len()),
        )?;
    }
    Ok("10 folds of 288/72/40".into())
}

fn metrics_fixture() -> Outcome {
    // confusion [[3, 1], [2, 4]]
    let labels = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
    let preds = [0, 0, 0, 1, 0, 0, 1, 1, 1, 1];
    let r = compute_metrics(&preds, &labels, 2).map_err(e2s)?;
    ensure(
        (r.accuracy - 0.7).abs() < 1e-12
            && (r.class_accuracy[0] - 0.75).abs() < 1e-12
            && (r.class_accuracy[1] - 2.0 / 3.0).abs() < 1e-12,
        format!("accuracy {} class acc {:?}", r.accuracy, r.class_accuracy),
    )
}

fn ppm_fixture() -> Outcome {
    let bytes = b"P6\n2 2\n255\n\x00\x33\xff\x80\x00\x00\x00\xff\x00\x11\x22\x33";
    let img = ppm::decode(bytes)?.to_chw();
    let want = [0, 128, 0, 17, 51, 0, 255, 34, 255, 0, 0, 51].map(|v| v as Real / 255.0);
    ensure(img.data() == want, format!("decoded {:?}", img.data()))
}

fn zscore_fixture() -> Outcome {
    let ds = Dataset {
        samples: [0.0, 2.0]
            .iter()
            .map(|&v| Sample {
                image: Tensor::full(&[3, 1, 1], v),
                label: 0,
            })
            .collect(),
        class_names: vec!["a".into()],
        split: "train".into(),
    };
    let st = fit_zscore(&ds).map_err(e2s)?;
    ensure(st.mean == [1.0; 3] && st.std == [1.0; 3], format!("{st:?}"))
}

fn augment_fixture() -> Outcome {
    let img = Tensor::from_fn(&[3, 3, 3], |i| i as Real / 26.0);
    let twice = crate::data::augment::hflip(&crate::data::augment::hflip(&img));
    ensure(twice == img, "double reflection")?;
    let same = augment(&img, &mut init_rng(0), &crate::data::AugmentPolicy::identity());
    ensure(same == img, "identity policy")
}

fn synth_fixture() -> Outcome {
    let a = synth_dataset(3, 4, (8, 8), 82).map_err(e2s)?;
    let b = synth_dataset(3, 4, (8, 8), 82).map_err(e2s)?;
    ensure(a == b && a.len() == 12, "same seed gives identical dataset")
}

fn gradcam_fixture() -> Outcome {
    let f = Tensor::new(vec![2, 2, 2], vec![1., 2., 3., 4., 4., 3., 2., 1.]).map_err(e2s)?;
    let g = Tensor::new(vec![2, 2, 2], vec![0.5, 0.5, 1.0, 0.0, -0.25, -0.5, 0.0, -0.25]).map_err(e2s)?;
    let cam = cam_from_maps(&f, &g).map_err(e2s)?;
    ensure(cam.data() == [0.0, 0.25, 1.0, 1.75], format!("cam {:?}", cam.data()))?;
    let n = normalize_heatmap(&cam);
    ensure(n.data()[0] == 0.0 && n.data()[3] == 1.0, "min-max normalization")
}

fn profile_fixture() -> Outcome {
    ensure(dense_conv_params(3, 8, 3) == 224, "dense 3→8 k=3 params")?;
    ensure(ConvSpec::new(3, 8, 3).macs(10, 10).map_err(e2s)? == 13_824, "conv MACs")?;
    let report = crate::profile::profile_model(&ModelConfig::default(), (32, 32)).map_err(e2s)?;
    let attn = report
        .rows
        .iter()
        .find(|r| r.layer == "caga.0.head0.dil0.attn")
        .ok_or("missing attention row")?;
    // branch of rate 1 on the 8×8 stem output: S = 6·6
    ensure(attn.macs == 2 * 8 * 36 * 36 + 36 * 36, format!("attention MACs {}", attn.macs))
}

fn tnsr_round_trip() -> Outcome {
    let t = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut init_rng(2));
    let back = tnsr::decode(&tnsr::encode(&t, tnsr::DType::native()))?;
    ensure(back == t, "encode/decode identity")
}

fn config_round_trip() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.set("dilations", "1,3").map_err(e2s)?;
    cfg.set("cascade_heads", "false").map_err(e2s)?;
    let back = RunConfig::parse(&cfg.to_kv()).map_err(e2s)?;
    ensure(back == cfg, "key=value round trip")
}

fn record(out: &mut Vec<CheckResult>, module: &'static str, name: impl Into<String>, outcome: Outcome) {
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    out.push(CheckResult {
        module,
        name: name.into(),
        passed,
        detail,
    });
}

/// Runs every check. `fault` breaks the backward rule of one tape op for
/// the analytic side of each gradient check.
pub fn run_selftest(fault: Option<&'static str>) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let gc = GradCheck {
        fault,
        ..GradCheck::default()
    };
    for case in op_suite(11, 8) {
        let r = gc.run(&case.inputs, &case.f);
        record(&mut out, "tensor-autodiff", format!("gradcheck {}", case.op), grad_outcome(r));
    }
    record(&mut out, "tensor-autodiff", "tnsr round trip", tnsr_round_trip());
    record(&mut out, "nn-layers", "conv2d loop oracle", conv_oracle());
    record(&mut out, "nn-layers", "valid-mode shape law", shape_law());
    record(&mut out, "nn-layers", "dsconv loop oracle", dsconv_oracle());
    record(&mut out, "caga-attention", "attention loop oracle", attention_oracle());
    let capped = GradCheck {
        max_per_input: Some(12),
        ..gc.clone()
    };
    record(
        &mut out,
        "caga-attention",
        "gradcheck caga_block",
        grad_outcome(block_gradcheck(&small_caga(), 3, 7, &capped)),
    );
    record(&mut out, "caga-attention", "single-head cga identity", single_head_identity());
    record(&mut out, "caga-attention", "parameter closed form", param_closed_form());
    record(&mut out, "model", "logits shape", model_shape());
    let model_gc = GradCheck {
        max_per_input: Some(48),
        ..gc.clone()
    };
    record(
        &mut out,
        "model",
        "gradcheck end to end",
        grad_outcome(model_gradcheck(&small_model_config(), &model_gc)),
    );
    record(&mut out, "training", "focal loss reduces to cross-entropy", focal_ce());
    record(&mut out, "training", "adamw scalar reference", adamw_reference());
    record(&mut out, "training", "kfold 288/72/40", kfold_sizes());
    record(&mut out, "training", "metrics confusion fixture", metrics_fixture());
    record(&mut out, "dataio", "ppm hand decode", ppm_fixture());
    record(&mut out, "dataio", "zscore two-point", zscore_fixture());
    record(&mut out, "dataio", "augmentation identities", augment_fixture());
    record(&mut out, "dataio", "synthetic determinism", synth_fixture());
    record(&mut out, "interpret-profile", "grad-cam 2x2 fixture", gradcam_fixture());
    record(&mut out, "interpret-profile", "profile counts", profile_fixture());
    record(&mut out, "cli", "config round trip", config_round_trip());
    out
}

/// `module  check  PASS|FAIL  detail` lines.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{:<18} {:<38} {:<4}  {}\n",
            r.module,
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    s.push_str(&format!("{} checks, {} failed\n", results.len(), failed));
    s
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_every_check() {
        let results = run_selftest(None);
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{}", format_table(&results));
        for module in ["tensor-autodiff", "nn-layers", "caga-attention", "model", "training", "dataio", "interpret-profile", "cli"] {
            assert!(results.iter().any(|r| r.module == module), "no check for {module}");
        }
    }

    #[test]
    fn injected_fault_is_named() {
        let results = run_selftest(fault_op("relu"));
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert!(failed.contains(&"gradcheck relu"), "{failed:?}");
        assert!(fault_op("nonsense").is_none());
    }
}
