//! Plain-text `key=value` run configuration.
//!
//! One entry per line, `#` starts a comment. Lists are comma separated.
//!
//! | key | example |
//! |-----|---------|
//! | `num_heads`, `head_dim`, `d_qkv`, `kernel`, `stride` | `3` |
//! | `dilations` | `1,2,3` |
//! | `cascade_dilations`, `cascade_heads` | `true` |
//! | `image_size` | `32x32` |
//! | `stem` (channels/stride per stage) | `16/2,32/2,48/1` |
//! | `num_classes`, `num_caga_blocks` | `4` |
//! | `lr`, `lr_gamma`, `weight_decay`, `beta1`, `beta2`, `eps` | `1e-5` |
//! | `batch_size`, `max_epochs`, `patience`, `seed` | `16` |
//! | `focal_gamma` | `2` |
//! | `focal_alpha` | `1,1,1,1` or `uniform` |
//! | `augment` | `false` |

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StemStage};
use crate::tensor::Real;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got `{v}`"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 25] = [
        "image_size",
        "stem",
        "num_classes",
        "num_caga_blocks",
        "num_heads",
        "head_dim",
        "d_qkv",
        "dilations",
        "kernel",
        "stride",
        "cascade_dilations",
        "cascade_heads",
        "lr",
        "lr_gamma",
        "weight_decay",
        "beta1",
        "beta2",
        "eps",
        "batch_size",
        "max_epochs",
        "patience",
        "seed",
        "focal_gamma",
        "focal_alpha",
        "augment",
    ];

    /// Defaults overridden by every entry of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let caa = &mut m.caga.caa;
        let t = &mut self.train;
        match key {
            "image_size" => {
                let (h, w) = v
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("image_size: expected HxW, got `{v}`")))?;
                m.image_size = (num(key, h)?, num(key, w)?);
            }
            "stem" => {
                m.stem = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|s| {
                            let (c, st) = s
                                .trim()
                                .split_once('/')
                                .ok_or_else(|| Error::Config(format!("stem: expected C/S, got `{s}`")))?;
                            Ok(StemStage {
                                out_channels: num(key, c)?,
                                stride: num(key, st)?,
                            })
                        })
                        .collect::<Result<_>>()?
                };
            }
            "num_classes" => m.num_classes = num(key, v)?,
            "num_caga_blocks" => m.num_caga_blocks = num(key, v)?,
            "num_heads" => m.caga.num_heads = num(key, v)?,
            "head_dim" => caa.head_dim = num(key, v)?,
            "d_qkv" => caa.d_qkv = num(key, v)?,
            "dilations" => caa.dilations = list(key, v)?,
            "kernel" => caa.kernel = num(key, v)?,
            "stride" => caa.stride = num(key, v)?,
            "cascade_dilations" => caa.cascade_dilations = flag(key, v)?,
            "cascade_heads" => m.caga.cascade_heads = flag(key, v)?,
            "lr" => t.optim.lr = num(key, v)?,
            "lr_gamma" => t.lr_gamma = num(key, v)?,
            "weight_decay" => t.optim.weight_decay = num(key, v)?,
            "beta1" => t.optim.beta1 = num(key, v)?,
            "beta2" => t.optim.beta2 = num(key, v)?,
            "eps" => t.optim.eps = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "max_epochs" => t.max_epochs = num(key, v)?,
            "patience" => t.patience = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "focal_gamma" => t.focal_gamma = num(key, v)?,
            "focal_alpha" => {
                t.focal_alpha = if v == "uniform" {
                    None
                } else {
                    Some(list::<Real>(key, v)?)
                }
            }
            "augment" => t.augment = flag(key, v)?.then(AugmentPolicy::default),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.train.focal(self.model.num_classes).validate(self.model.num_classes)
    }

    /// Every key, one per line, in [`RunConfig::KEYS`] order.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let caa = &m.caga.caa;
        let t = &self.train;
        let stem: Vec<String> = m.stem.iter().map(|s| format!("{}/{}", s.out_channels, s.stride)).collect();
        let values = [
            format!("{}x{}", m.image_size.0, m.image_size.1),
            stem.join(","),
            m.num_classes.to_string(),
            m.num_caga_blocks.to_string(),
            m.caga.num_heads.to_string(),
            caa.head_dim.to_string(),
            caa.d_qkv.to_string(),
            join(&caa.dilations),
            caa.kernel.to_string(),
            caa.stride.to_string(),
            caa.cascade_dilations.to_string(),
            m.caga.cascade_heads.to_string(),
            format!("{:e}", t.optim.lr),
            t.lr_gamma.to_string(),
            t.optim.weight_decay.to_string(),
            t.optim.beta1.to_string(),
            t.optim.beta2.to_string(),
            format!("{:e}", t.optim.eps),
            t.batch_size.to_string(),
            t.max_epochs.to_string(),
            t.patience.to_string(),
            t.seed.to_string(),
            t.focal_gamma.to_string(),
            t.focal_alpha.as_ref().map_or("uniform".to_string(), |a| join(a)),
            t.augment.is_some().to_string(),
        ];
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
