mod common;

use caga::model::{predict, probabilities, Model, ModelConfig};
use caga::{Real, Tensor};
use common::{rand_tensor, rng};
use proptest::prelude::*;

const TOL: Real = if cfg!(feature = "f32") { 1e-5 } else { 1e-12 };

#[test]
fn logits_shape() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let store = model.init(82);
    let x = rand_tensor(&[2, 3, 32, 32], &mut rng(1));
    let logits = model.logits(&store, &x).unwrap();
    assert_eq!(logits.shape(), &[2, 4]);
    assert!(logits.is_finite());
    assert!(model.logits(&store, &rand_tensor(&[1, 3, 16, 16], &mut rng(1))).is_err());
}

#[test]
fn zero_input_yields_head_bias() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut store = model.init(82);
    let logits = model.logits(&store, &Tensor::zeros(&[1, 3, 32, 32])).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let bias = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    *store.get_mut("head.bias").unwrap() = bias.clone();
    let logits = model.logits(&store, &Tensor::zeros(&[3, 3, 32, 32])).unwrap();
    for row in logits.data().chunks(4) {
        assert_eq!(row, bias.data());
    }
}

#[test]
fn batch_permutation_equivariance() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let store = model.init(3);
    let x = rand_tensor(&[3, 3, 32, 32], &mut rng(2));
    let y = model.logits(&store, &x).unwrap();
    let perm = [2, 0, 1];
    let plane = 3 * 32 * 32;
    let xp: Vec<Real> = perm.iter().flat_map(|&i| x.data()[i * plane..(i + 1) * plane].to_vec()).collect();
    let yp = model.logits(&store, &Tensor::new(vec![3, 3, 32, 32], xp).unwrap()).unwrap();
    for (row, &i) in perm.iter().enumerate() {
        for c in 0..4 {
            assert!((yp.at(&[row, c]) - y.at(&[i, c])).abs() < TOL);
        }
    }
}

#[test]
fn removing_caga_drops_exactly_its_params() {
    let cfg = ModelConfig::default();
    let full = Model::new(cfg.clone()).unwrap();
    let bare = Model::new(cfg.without_caga()).unwrap();
    let caga = caga::caga::caga_param_count(&cfg.caga, cfg.stem_channels()).unwrap();
    let head_delta = (cfg.caga.channels() - cfg.stem_channels()) * cfg.num_classes;
    assert_eq!(full.param_count().unwrap() - bare.param_count().unwrap(), caga + head_delta);
    assert_eq!(full.init(1).num_scalars(), full.param_count().unwrap());
    assert_eq!(bare.init(1).num_scalars(), bare.param_count().unwrap());
}

#[test]
fn predict_examples() {
    let t = Tensor::new(vec![1, 3], vec![0.1, 2.0, -1.0]).unwrap();
    assert_eq!(predict(&t), vec![1]);
    assert_eq!(predict(&Tensor::full(&[2, 5], 0.3)), vec![0, 0]);
}

proptest! {
    #[test]
    fn softmax_keeps_argmax(seed in 0u64..1000, b in 1usize..6, c in 2usize..7) {
        let logits = rand_tensor(&[b, c], &mut rng(seed)).map(|v| 5.0 * v);
        let p = probabilities(&logits);
        prop_assert_eq!(predict(&p), predict(&logits));
        for row in p.data().chunks(c) {
            prop_assert!((row.iter().sum::<Real>() - 1.0).abs() < 1e-5);
        }
    }
}
