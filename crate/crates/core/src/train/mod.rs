//! Training and evaluation protocol: focal loss, AdamW with exponential
//! learning-rate decay, early stopping on validation loss, stratified k-fold
//! cross-validation and the cascade ablation grid.

pub mod kfold;
pub mod loss;
pub mod metrics;
pub mod optim;

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::caga::caga_param_count;
use crate::data::{apply_zscore, augment, fit_zscore, AugmentPolicy, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::model::{predict, Model, ModelConfig};
use crate::nn::{Ctx, ParamStore, DEFAULT_SEED};
use crate::tensor::{Real, Tensor};

pub use kfold::{kfold_split, Fold};
pub use loss::{focal_loss, FocalLossConfig};
pub use metrics::{aggregate_folds, compute_metrics, folds_csv, summary_table, FoldSummary, MetricsReport};
pub use optim::{adamw_step, early_stop_check, lr_at_epoch, AdamState, AdamW, AdamWParams};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optim: AdamWParams,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_gamma: Real,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a strict validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub focal_gamma: Real,
    /// Per-class focal weights; uniform when `None`.
    pub focal_alpha: Option<Vec<Real>>,
    /// Runtime (per-epoch) augmentation of training batches.
    pub augment: Option<AugmentPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optim: AdamWParams::default(),
            lr_gamma: 0.95,
            batch_size: 16,
            max_epochs: 50,
            patience: 10,
            seed: DEFAULT_SEED,
            focal_gamma: 2.0,
            focal_alpha: None,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        if !(o.lr > 0.0 && self.lr_gamma > 0.0 && o.eps > 0.0) {
            return Err(Error::Config("lr, lr_gamma and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.weight_decay < 0.0 {
            return Err(Error::Config("betas must lie in [0, 1) and weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be >= 1".into()));
        }
        Ok(())
    }

    pub fn focal(&self, num_classes: usize) -> FocalLossConfig {
        FocalLossConfig {
            gamma: self.focal_gamma,
            alpha: self.focal_alpha.clone().unwrap_or_else(|| vec![1.0; num_classes]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: Real,
    pub train_loss: Real,
    pub val_loss: Real,
    pub val_accuracy: Real,
}

pub struct FitResult {
    /// Parameters and buffers of the epoch with the lowest validation loss.
    pub store: ParamStore,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean focal loss and predictions over a dataset in inference mode.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    focal: &FocalLossConfig,
    batch_size: usize,
) -> Result<(Real, Vec<usize>)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk)?;
        let mut ctx = Ctx::eval(store);
        let x = ctx.input(images);
        let out = model.forward(&mut ctx, x)?;
        let loss = focal_loss(&mut ctx.tape, out.logits, &labels, focal)?;
        total += ctx.tape.value(loss).item() * chunk.len() as Real;
        preds.extend(predict(ctx.tape.value(out.logits)));
    }
    Ok((total / data.len() as Real, preds))
}

pub fn evaluate_metrics(model: &Model, store: &ParamStore, data: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    let focal = FocalLossConfig::uniform(data.num_classes());
    let (_, preds) = evaluate(model, store, data, &focal, batch_size)?;
    compute_metrics(&preds, &data.labels(), data.num_classes())
}

fn augmented_batch(
    data: &Dataset,
    indices: &[usize],
    policy: &AugmentPolicy,
    stream: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let (images, labels) = data.batch(indices)?;
    let shape = images.shape().to_vec();
    let per = shape[1] * shape[2] * shape[3];
    let mut out = Vec::with_capacity(images.numel());
    for (k, &i) in indices.iter().enumerate() {
        let img = Tensor::new(shape[1..].to_vec(), images.data()[k * per..(k + 1) * per].to_vec())?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream ^ i as u64);
        out.extend_from_slice(augment(&img, &mut rng, policy).data());
    }
    Ok((Tensor::new(shape, out)?, labels))
}

/// Trains `model` from `store`, monitoring validation loss. Batches are
/// reshuffled each epoch from `cfg.seed`.
pub fn fit(
    model: &Model,
    mut store: ParamStore,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut log: impl FnMut(&EpochLog),
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("training and validation splits must be nonempty".into()));
    }
    let focal = cfg.focal(model.cfg.num_classes);
    focal.validate(model.cfg.num_classes)?;
    let mut opt = AdamW::new(cfg.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history: Vec<EpochLog> = Vec::new();
    let mut val_losses = Vec::new();
    let mut best = (Real::INFINITY, 0usize, store.clone());
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let lr = lr_at_epoch(cfg.optim.lr, cfg.lr_gamma, epoch as u32);
        opt.set_lr(lr);
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = match &cfg.augment {
                Some(policy) => {
                    let stream = cfg.seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    augmented_batch(train, chunk, policy, stream)?
                }
                None => train.batch(chunk)?,
            };
            let (grads, updates, loss) = {
                let mut ctx = Ctx::train(&store);
                let x = ctx.input(images);
                let out = model.forward(&mut ctx, x)?;
                let loss = focal_loss(&mut ctx.tape, out.logits, &labels, &focal)?;
                let value = ctx.tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numeric {
                        op: "fit".into(),
                        msg: format!("non-finite training loss at epoch {epoch}"),
                    });
                }
                ctx.tape.backward(loss)?;
                (ctx.param_grads(), ctx.bn_updates().to_vec(), value)
            };
            opt.step(&mut store, &grads)?;
            model.apply_bn_updates(&mut store, &updates)?;
            train_loss += loss * chunk.len() as Real;
        }
        let (val_loss, preds) = evaluate(model, &store, val, &focal, cfg.batch_size)?;
        let correct = preds.iter().zip(val.labels()).filter(|(p, l)| **p == *l).count();
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: train_loss / train.len() as Real,
            val_loss,
            val_accuracy: correct as Real / val.len() as Real,
        };
        log(&entry);
        history.push(entry);
        if val_loss < best.0 {
            best = (val_loss, epoch, store.clone());
        }
        val_losses.push(val_loss);
        if early_stop_check(&val_losses, cfg.patience) {
            stopped_early = true;
            break;
        }
    }
    Ok(FitResult {
        store: best.2,
        history,
        best_epoch: best.1,
        stopped_early,
    })
}

/// Outcome of one cross-validation fold.
pub struct FoldOutcome {
    pub fold: usize,
    pub norm: NormStats,
    pub fit: FitResult,
    pub train_report: MetricsReport,
    pub test_report: MetricsReport,
}

pub struct CvResult {
    pub folds: Vec<FoldOutcome>,
    /// Aggregate of the test reports.
    pub summary: FoldSummary,
}

/// Trains and tests one fold. Normalization statistics come from the
/// fold's training split alone; the model starts from `train_cfg.seed`.
pub fn run_fold(
    data: &Dataset,
    fold_index: usize,
    fold: &Fold,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    let model = Model::new(model_cfg.clone())?;
    let train = data.subset(&fold.train, "train");
    let norm = fit_zscore(&train)?;
    let train = apply_zscore(&train, &norm);
    let val = apply_zscore(&data.subset(&fold.val, "val"), &norm);
    let test = apply_zscore(&data.subset(&fold.test, "test"), &norm);
    let store = model.init(train_cfg.seed);
    let fit = fit(&model, store, &train, &val, train_cfg, |_| {})?;
    let train_report = evaluate_metrics(&model, &fit.store, &train, train_cfg.batch_size)?;
    let test_report = evaluate_metrics(&model, &fit.store, &test, train_cfg.batch_size)?;
    Ok(FoldOutcome {
        fold: fold_index,
        norm,
        fit,
        train_report,
        test_report,
    })
}

/// Runs `f(i)` for `i in 0..n` on up to `jobs` threads; results keep index
/// order. The first error (by index) is returned.
pub fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

/// Stratified k-fold cross-validation. `max_folds` limits how many of the
/// k folds are trained (the partition itself is always k-way).
pub fn run_cv(
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    k: usize,
    jobs: usize,
    max_folds: Option<usize>,
) -> Result<CvResult> {
    if data.num_classes() != model_cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            data.num_classes(),
            model_cfg.num_classes
        )));
    }
    let labels = data.labels();
    let folds = kfold_split(data.len(), k, train_cfg.seed, Some(&labels))?;
    let n = max_folds.map_or(k, |m| m.clamp(1, k));
    let outcomes = parallel_map(n, jobs, |i| run_fold(data, i, &folds[i], model_cfg, train_cfg))?;
    let reports: Vec<MetricsReport> = outcomes.iter().map(|o| o.test_report.clone()).collect();
    let summary = aggregate_folds(&reports)?;
    Ok(CvResult {
        folds: outcomes,
        summary,
    })
}

/// `(cascade_dilations, cascade_heads)` rows of the ablation table:
/// cascaded CAA without CGA, CAA without cascading inside CGA, full block.
pub const ABLATION_GRID: [(bool, bool); 3] = [(true, false), (false, true), (true, true)];

pub struct AblationRow {
    pub cascade_dilations: bool,
    pub cascade_heads: bool,
    pub params: usize,
    pub caga_params: usize,
    pub mean_accuracy: Real,
    pub std_accuracy: Real,
    pub cv: CvResult,
}

pub fn run_ablation(
    grid: &[(bool, bool)],
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    k: usize,
    jobs: usize,
    max_folds: Option<usize>,
) -> Result<Vec<AblationRow>> {
    grid.iter()
        .map(|&(cascade_dilations, cascade_heads)| {
            let mut cfg = model_cfg.clone();
            cfg.caga.caa.cascade_dilations = cascade_dilations;
            cfg.caga.cascade_heads = cascade_heads;
            let model = Model::new(cfg.clone())?;
            let caga_params = if cfg.num_caga_blocks > 0 {
                caga_param_count(&cfg.caga, cfg.stem_channels())?
            } else {
                0
            };
            let cv = run_cv(data, &cfg, train_cfg, k, jobs, max_folds)?;
            let (mean_accuracy, std_accuracy) = cv.summary.get("accuracy").unwrap_or((0.0, 0.0));
            Ok(AblationRow {
                cascade_dilations,
                cascade_heads,
                params: model.param_count()?,
                caga_params,
                mean_accuracy,
                std_accuracy,
                cv,
            })
        })
        .collect()
}

/// Ablation table with columns `cascading_in_caa,caa,cga,params,caga_params,
/// mean_accuracy,std_accuracy`; CAA is present in every row.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("cascading_in_caa,caa,cga,params,caga_params,mean_accuracy,std_accuracy\n");
    let mark = |b: bool| if b { "yes" } else { "no" };
    for r in rows {
        let _ = writeln!(
            out,
            "{},yes,{},{},{},{:.6},{:.6}",
            mark(r.cascade_dilations),
            mark(r.cascade_heads),
            r.params,
            r.caga_params,
            r.mean_accuracy,
            r.std_accuracy
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let v = parallel_map(7, 3, |i| Ok(i * i)).unwrap();
        assert_eq!(v, vec![0, 1, 4, 9, 16, 25, 36]);
        let e = parallel_map(4, 2, |i| if i == 2 { Err(Error::Contract("x".into())) } else { Ok(i) });
        assert!(e.is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
