mod common;

use caga::caga::{caga_param_count, CagaConfig};
use caga::interpret::{cam_from_maps, grad_cam, normalize_heatmap};
use caga::model::{Model, ModelConfig};
use caga::nn::ConvSpec;
use caga::profile::{count_macs, count_params, dense_conv_params, profile_caga_block, profile_model, ProfileReport};
use caga::{tnsr, Error, Real, Tensor};
use common::{attention, conv, rand_tensor, rng, ConvCase};
use proptest::prelude::*;

#[test]
fn hand_cam_on_two_channels() {
    let f = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
    let g = Tensor::new(vec![2, 2, 2], vec![0.5, 0.5, 0.5, 0.5, -0.25, -0.25, -0.25, -0.25]).unwrap();
    // 0.5·F0 − 0.25·F1 = [−0.5, 0.25, 1.0, 1.75], ReLU clips the first
    let cam = cam_from_maps(&f, &g).unwrap();
    assert_eq!(cam.data(), &[0.0, 0.25, 1.0, 1.75]);
    let norm = normalize_heatmap(&cam);
    assert_eq!(norm.data(), &[0.0, 0.25 / 1.75, 1.0 / 1.75, 1.0]);
    let neg = g.map(|v| -v.abs());
    assert!(cam_from_maps(&f, &neg).unwrap().data().iter().all(|&v| v == 0.0));
    let ones = Tensor::ones(&[3, 4, 4]);
    let uniform = normalize_heatmap(&cam_from_maps(&ones, &ones).unwrap());
    assert!(uniform.data().iter().all(|&v| v == uniform.data()[0]));
}

#[test]
fn grad_cam_on_the_model() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let store = model.init(82);
    let img = rand_tensor(&[3, 32, 32], &mut rng(4));
    for layer in model.layer_names() {
        let r = grad_cam(&model, &store, &img, 2, &layer).unwrap();
        assert_eq!(r.heatmap.shape(), &[32, 32], "{layer}");
        assert!(r.heatmap.data().iter().all(|v| (0.0..=1.0).contains(v)), "{layer}");
    }
    assert_eq!(model.default_cam_layer().as_deref(), Some("caga.0"));
    assert!(matches!(grad_cam(&model, &store, &img, 0, "nope"), Err(Error::Lookup(_))));
    assert!(grad_cam(&model, &store, &img, 4, "caga.0").is_err());
}

#[test]
fn profile_examples() {
    assert_eq!(dense_conv_params(3, 8, 3), 224);
    let model = Model::new(ModelConfig::default()).unwrap();
    let report = count_params(&model).unwrap();
    let head = report.rows.iter().find(|r| r.layer == "head").unwrap();
    assert_eq!((head.params, head.macs), (48 * 4 + 4, 48 * 4));
    assert_eq!(ConvSpec::new(1, 1, 1).macs(4, 4).unwrap(), 16);
    assert_eq!(ConvSpec::new(3, 8, 3).macs(10, 10).unwrap(), 13_824);
}

#[test]
fn attention_macs_match_oracle_iterations() {
    // one branch at S = 64 positions, d_qkv = 8
    let cfg = CagaConfig {
        num_heads: 1,
        caa: caga::caga::CaaConfig {
            dilations: vec![1],
            ..Default::default()
        },
        cascade_heads: true,
    };
    let mut rep = ProfileReport::default();
    profile_caga_block(&mut rep, "b", &cfg, 16, (10, 10)).unwrap();
    let attn = rep.rows.iter().find(|r| r.layer.ends_with(".attn")).unwrap();
    let (d, s) = (8usize, 64usize);
    assert_eq!(attn.macs, 65_536 + 4_096);
    // dot products d·S² and weighted sums d·S², as the loop oracle runs them
    let mut r = rng(1);
    let q = rand_tensor(&[d, s], &mut r);
    let (_, a) = attention(q.data(), q.data(), q.data(), d, s);
    assert_eq!(a.len(), s * s);
    assert_eq!(2 * d * s * s + s * s, attn.macs);
}

proptest! {
    #[test]
    fn conv_macs_equal_oracle_iterations(
        cin in 1usize..4, cout in 1usize..4, k in 1usize..4, stride in 1usize..3,
        dilation in 1usize..3, same in any::<bool>(), h in 7usize..12, w in 7usize..12,
    ) {
        let mut spec = ConvSpec::new(cin, cout, k).stride(stride).dilation(dilation);
        if same && k % 2 == 1 {
            spec = spec.same();
        }
        let padding = spec.pad().unwrap();
        let case = ConvCase { batch: 1, cin, cout, groups: 1, h, w, k, stride, dilation, padding };
        let x = vec![1.0 as Real; cin * h * w];
        let wt = vec![1.0 as Real; cout * cin * k * k];
        let (_, iters) = conv(&case, &x, &wt, None);
        prop_assert_eq!(spec.macs(h, w).unwrap(), iters);
    }
}

#[test]
fn model_macs_sum_conv_oracle_iterations() {
    let cfg = ModelConfig::default();
    let report = count_macs(&Model::new(cfg.clone()).unwrap(), (32, 32)).unwrap();
    let (mut ch, mut h, mut w) = (3, 32, 32);
    for (i, stage) in cfg.stem.iter().enumerate() {
        let case = ConvCase {
            batch: 1,
            cin: ch,
            cout: stage.out_channels,
            groups: 1,
            h,
            w,
            k: 3,
            stride: stage.stride,
            dilation: 1,
            padding: 1,
        };
        let (_, iters) = conv(&case, &vec![0.0; ch * h * w], &vec![0.0; stage.out_channels * ch * 9], None);
        let row = report.rows.iter().find(|r| r.layer == format!("stem.{i}.conv")).unwrap();
        assert_eq!(row.macs, iters);
        (ch, h, w) = (stage.out_channels, case.out_extent(h), case.out_extent(w));
    }
}

#[test]
fn params_are_additive_and_caga_is_separable() {
    let cfg = ModelConfig::default();
    let full = profile_model(&cfg, (32, 32)).unwrap();
    let bare = profile_model(&cfg.without_caga(), (32, 32)).unwrap();
    let caga = caga_param_count(&cfg.caga, cfg.stem_channels()).unwrap();
    assert_eq!(full.total_params() - bare.total_params(), caga);
    assert_eq!(full.params_under("caga.0."), caga);
    assert_eq!(full.total_params(), full.rows.iter().map(|r| r.params).sum::<usize>());
    assert_eq!(full.total_params(), 62_884);
    assert_eq!(full.total_macs(), 2_507_040);
    let mut two = cfg.clone();
    two.num_caga_blocks = 2;
    let twice = profile_model(&two, (32, 32)).unwrap();
    let second = caga_param_count(&cfg.caga, cfg.caga.channels()).unwrap();
    assert_eq!(twice.total_params(), full.total_params() + second);
    assert_eq!(twice.total_params(), Model::new(two).unwrap().init(1).num_scalars());
}

#[test]
fn manifest_entries_sum_to_model_total() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.init(82).save(dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    let total: usize = manifest
        .lines()
        .filter_map(|l| l.strip_prefix("param "))
        .map(|l| {
            let file = l.split_whitespace().nth(1).unwrap();
            tnsr::read(&dir.path().join(file)).unwrap().numel()
        })
        .sum();
    assert_eq!(total, count_params(&model).unwrap().total_params());
}
