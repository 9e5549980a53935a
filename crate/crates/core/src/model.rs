//! Desk-scale classifier: convolutional stem, CAGA block(s), global average
//! pooling and a linear head.
//!
//! The stem stands in for a pretrained backbone. It only has to turn an RGB
//! image into a multi-channel feature map large enough for the widest
//! dilated kernel.

use crate::caga::{caga_param_count, CagaBlock, CagaConfig};
use crate::error::{Error, Result};
use crate::nn::{init_rng, BatchNorm2d, Conv2d, ConvSpec, Ctx, Linear, ParamStore};
use crate::tape::{BatchStats, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemStage {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    /// 3×3 conv + BN + ReLU stages, applied in order.
    pub stem: Vec<StemStage>,
    pub caga: CagaConfig,
    pub num_classes: usize,
    pub num_caga_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: (32, 32),
            stem: vec![
                StemStage { out_channels: 16, stride: 2 },
                StemStage { out_channels: 32, stride: 2 },
                StemStage { out_channels: 48, stride: 1 },
            ],
            caga: CagaConfig::default(),
            num_classes: 4,
            num_caga_blocks: 1,
        }
    }
}

impl ModelConfig {
    pub fn stem_channels(&self) -> usize {
        self.stem.last().map_or(3, |s| s.out_channels)
    }

    /// Spatial extents after the stem.
    pub fn stem_extent(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = self.image_size;
        for stage in &self.stem {
            let spec = ConvSpec::new(1, 1, 3).stride(stage.stride).same();
            h = spec.output_extent(h)?;
            w = spec.output_extent(w)?;
        }
        Ok((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.stem.iter().any(|s| s.out_channels == 0 || s.stride == 0) {
            return Err(Error::Config("stem stages need positive channels and stride".into()));
        }
        self.caga.validate()?;
        let (h, w) = self.stem_extent()?;
        if self.num_caga_blocks > 0 {
            let k_eff = self.caga.caa.max_k_eff()?;
            if h.min(w) < k_eff {
                return Err(Error::Config(format!(
                    "stem output {h}×{w} is smaller than the widest effective kernel {k_eff}"
                )));
            }
        }
        Ok(())
    }

    /// Same model with the CAGA blocks removed (the head reads the stem).
    pub fn without_caga(&self) -> Self {
        ModelConfig {
            num_caga_blocks: 0,
            ..self.clone()
        }
    }
}

/// Logits plus the named intermediate feature maps (for Grad-CAM).
pub struct ForwardOutput {
    pub logits: Var,
    pub features: Vec<(String, Var)>,
}

impl ForwardOutput {
    pub fn feature(&self, layer: &str) -> Result<Var> {
        self.features
            .iter()
            .find(|(name, _)| name == layer)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::Lookup(layer.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub stem: Vec<(Conv2d, BatchNorm2d)>,
    pub blocks: Vec<CagaBlock>,
    pub head: Linear,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut channels = 3;
        let mut stem = Vec::with_capacity(cfg.stem.len());
        for (i, stage) in cfg.stem.iter().enumerate() {
            let spec = ConvSpec::new(channels, stage.out_channels, 3)
                .stride(stage.stride)
                .same()
                .bias(false);
            stem.push((
                Conv2d::new(format!("stem.{i}.conv"), spec),
                BatchNorm2d::new(format!("stem.{i}.bn"), stage.out_channels),
            ));
            channels = stage.out_channels;
        }
        let mut blocks = Vec::with_capacity(cfg.num_caga_blocks);
        for j in 0..cfg.num_caga_blocks {
            blocks.push(CagaBlock::new(format!("caga.{j}"), channels, cfg.caga.clone())?);
            channels = cfg.caga.channels();
        }
        let head = Linear::new("head", channels, cfg.num_classes);
        Ok(Model {
            cfg,
            stem,
            blocks,
            head,
        })
    }

    /// Fresh parameters, Xavier-uniform from `seed`.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = init_rng(seed);
        let mut store = ParamStore::new();
        for (conv, bn) in &self.stem {
            conv.init(&mut store, &mut rng);
            bn.init(&mut store);
        }
        for block in &self.blocks {
            block.init(&mut store, &mut rng);
        }
        self.head.init(&mut store, &mut rng);
        store
    }

    /// Feature layer identifiers, in forward order.
    pub fn layer_names(&self) -> Vec<String> {
        (0..self.stem.len())
            .map(|i| format!("stem.{i}"))
            .chain((0..self.blocks.len()).map(|j| format!("caga.{j}")))
            .collect()
    }

    /// Default Grad-CAM layer: the last CAGA block output (post-BN).
    pub fn default_cam_layer(&self) -> Option<String> {
        self.layer_names().pop()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<ForwardOutput> {
        let shape = ctx.tape.shape(images).to_vec();
        let (h, w) = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w {
            return Err(Error::shape("model input", &shape, &[3, h, w]));
        }
        let mut features = Vec::new();
        let mut x = images;
        for (i, (conv, bn)) in self.stem.iter().enumerate() {
            x = conv.forward(ctx, x)?;
            x = bn.forward(ctx, x)?;
            x = ctx.tape.relu(x);
            features.push((format!("stem.{i}"), x));
        }
        for (j, block) in self.blocks.iter().enumerate() {
            x = block.forward(ctx, x)?;
            features.push((format!("caga.{j}"), x));
        }
        let s = ctx.tape.shape(x).to_vec();
        let flat = ctx.tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = ctx.tape.mean_axis(flat, 2)?;
        let logits = self.head.forward(ctx, pooled)?;
        Ok(ForwardOutput { logits, features })
    }

    pub fn batchnorms(&self) -> impl Iterator<Item = &BatchNorm2d> {
        self.stem
            .iter()
            .map(|(_, bn)| bn)
            .chain(self.blocks.iter().map(|b| &b.bn))
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn apply_bn_updates(&self, store: &mut ParamStore, updates: &[(String, BatchStats)]) -> Result<()> {
        for (name, stats) in updates {
            let bn = self
                .batchnorms()
                .find(|bn| &bn.name == name)
                .ok_or_else(|| Error::Lookup(name.clone()))?;
            bn.apply_update(store, stats)?;
        }
        Ok(())
    }

    /// Inference logits `[B, num_classes]` for a batch of images.
    pub fn logits(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::eval(store);
        let x = ctx.input(images.clone());
        let out = self.forward(&mut ctx, x)?;
        Ok(ctx.tape.value(out.logits).clone())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> Result<usize> {
        let stem: usize = self
            .stem
            .iter()
            .map(|(c, b)| c.param_count() + b.param_count())
            .sum();
        let mut caga = 0;
        let mut channels = self.cfg.stem_channels();
        for _ in &self.blocks {
            caga += caga_param_count(&self.cfg.caga, channels)?;
            channels = self.cfg.caga.channels();
        }
        Ok(stem + caga + self.head.param_count())
    }
}

/// Argmax per row, lowest index on ties.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Row-wise softmax of a logits matrix (plain values, no tape).
pub fn probabilities(logits: &Tensor) -> Tensor {
    let c = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let z: Real = row.iter().map(|v| (v - m).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_ties_pick_lowest() {
        let t = Tensor::new(vec![2, 3], vec![0.1, 2.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(predict(&t), vec![1, 0]);
    }

    #[test]
    fn collapsed_stem_is_a_config_error() {
        let cfg = ModelConfig {
            stem: vec![
                StemStage { out_channels: 8, stride: 2 },
                StemStage { out_channels: 8, stride: 2 },
                StemStage { out_channels: 8, stride: 2 },
            ],
            ..ModelConfig::default()
        };
        assert!(matches!(Model::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn closed_form_count_matches_store() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let store = model.init(82);
        assert_eq!(store.num_scalars(), model.param_count().unwrap());
    }
}
