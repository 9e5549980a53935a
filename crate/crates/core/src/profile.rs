//! Analytic parameter and multiply-accumulate accounting.
//!
//! Conventions, per sample:
//! - convolution: `k² · C_in/groups · C_out · H̃ · W̃`
//! - linear: `in · out`
//! - attention branch: `2 · d_qkv · S²` for the two products plus `S²` for
//!   the softmax
//! - bilinear interpolation: 4 per output element
//! - batch norm, ReLU, residual additions and pooling: 0

use std::fmt::Write as _;

use crate::caga::{CagaConfig, DSCONV_KERNEL};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::ConvSpec;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProfileRow {
    pub layer: String,
    pub params: usize,
    pub macs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ProfileReport {
    pub rows: Vec<ProfileRow>,
}

impl ProfileReport {
    fn push(&mut self, layer: impl Into<String>, params: usize, macs: usize) {
        self.rows.push(ProfileRow {
            layer: layer.into(),
            params,
            macs,
        });
    }

    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> usize {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// Sum over rows whose layer name starts with `prefix`.
    pub fn params_under(&self, prefix: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| r.layer.starts_with(prefix))
            .map(|r| r.params)
            .sum()
    }

    /// `layer,params,macs` with a trailing `total` row. With `flops` the
    /// MAC column is doubled.
    pub fn to_csv(&self, flops: bool) -> String {
        let scale = if flops { 2 } else { 1 };
        let mut out = String::from(if flops { "layer,params,flops\n" } else { "layer,params,macs\n" });
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.layer, r.params, r.macs * scale);
        }
        let _ = writeln!(out, "total,{},{}", self.total_params(), self.total_macs() * scale);
        out
    }

    fn conv(&mut self, name: &str, spec: &ConvSpec, h: usize, w: usize) -> Result<(usize, usize)> {
        let (oh, ow) = (spec.output_extent(h)?, spec.output_extent(w)?);
        self.push(name, spec.param_count(), spec.macs(h, w)?);
        Ok((oh, ow))
    }
}

/// Relative reduction `1 - new/old`.
pub fn reduction(old: usize, new: usize) -> f64 {
    1.0 - new as f64 / old as f64
}

/// Parameters of a dense `k×k` convolution with bias.
pub fn dense_conv_params(in_channels: usize, out_channels: usize, k: usize) -> usize {
    ConvSpec::new(in_channels, out_channels, k).param_count()
}

/// Rows of one CAGA block named `name` on a `[in_channels, h, w]` input.
pub fn profile_caga_block(
    report: &mut ProfileReport,
    name: &str,
    cfg: &CagaConfig,
    in_channels: usize,
    (h, w): (usize, usize),
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels();
    let caa = &cfg.caa;
    let k = DSCONV_KERNEL;
    report.conv(&format!("{name}.dsconv.dw"), &ConvSpec::depthwise(in_channels, k).same(), h, w)?;
    report.conv(&format!("{name}.dsconv.pw"), &ConvSpec::new(in_channels, c, 1), h, w)?;
    let (hd, dq) = (caa.head_dim, caa.d_qkv);
    for i in 0..cfg.num_heads {
        let head = format!("{name}.head{i}");
        let mut prev: Option<(usize, usize)> = None;
        for (j, &d) in caa.dilations.iter().enumerate() {
            if let (true, Some((ph, pw))) = (caa.cascade_dilations, prev) {
                let spec = ConvSpec::new(dq, hd, 1);
                report.conv(&format!("{head}.dil{}.cascade", j - 1), &spec, ph, pw)?;
                report.push(format!("{head}.dil{}.cascade_interp", j - 1), 0, 4 * hd * h * w);
            }
            let qkv = ConvSpec::new(hd, 3 * dq, caa.kernel)
                .dilation(d)
                .stride(caa.stride)
                .bias(false);
            let (rh, rw) = report.conv(&format!("{head}.dil{j}.qkv"), &qkv, h, w)?;
            report.conv(&format!("{head}.dil{j}.mix"), &ConvSpec::new(3 * dq, 3 * dq, 1).bias(false), rh, rw)?;
            let s = rh * rw;
            report.push(format!("{head}.dil{j}.attn"), 0, 2 * dq * s * s + s * s);
            report.push(format!("{head}.dil{j}.interp"), 0, 4 * dq * h * w);
            prev = Some((rh, rw));
        }
        let out = ConvSpec::new(caa.dilations.len() * dq, hd, 1);
        report.conv(&format!("{head}.proj"), &out, h, w)?;
    }
    report.conv(&format!("{name}.proj"), &ConvSpec::new(c, c, 1), h, w)?;
    report.push(format!("{name}.bn"), 2 * c, 0);
    Ok(())
}

/// Per-layer rows of the whole classifier at input size `(h, w)`.
pub fn profile_model(cfg: &ModelConfig, (h, w): (usize, usize)) -> Result<ProfileReport> {
    let cfg = ModelConfig {
        image_size: (h, w),
        ..cfg.clone()
    };
    cfg.validate()?;
    let mut report = ProfileReport::default();
    let (mut ch, mut eh, mut ew) = (3, h, w);
    for (i, stage) in cfg.stem.iter().enumerate() {
        let spec = ConvSpec::new(ch, stage.out_channels, 3)
            .stride(stage.stride)
            .same()
            .bias(false);
        (eh, ew) = report.conv(&format!("stem.{i}.conv"), &spec, eh, ew)?;
        report.push(format!("stem.{i}.bn"), 2 * stage.out_channels, 0);
        ch = stage.out_channels;
    }
    for j in 0..cfg.num_caga_blocks {
        profile_caga_block(&mut report, &format!("caga.{j}"), &cfg.caga, ch, (eh, ew))?;
        ch = cfg.caga.channels();
    }
    report.push("head", ch * cfg.num_classes + cfg.num_classes, ch * cfg.num_classes);
    Ok(report)
}

/// Parameter rows at the model's configured input size.
pub fn count_params(model: &Model) -> Result<ProfileReport> {
    profile_model(&model.cfg, model.cfg.image_size)
}

/// MAC rows for an input of spatial size `(h, w)`.
pub fn count_macs(model: &Model, input: (usize, usize)) -> Result<ProfileReport> {
    profile_model(&model.cfg, input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caga::caga_param_count;

    #[test]
    fn spec_examples() {
        assert_eq!(dense_conv_params(3, 8, 3), 224);
        assert_eq!(ConvSpec::new(1, 1, 1).macs(4, 4).unwrap(), 16);
        assert_eq!(ConvSpec::new(3, 8, 3).macs(10, 10).unwrap(), 13_824);
    }

    #[test]
    fn rows_match_store_and_closed_form() {
        let cfg = ModelConfig::default();
        let model = Model::new(cfg.clone()).unwrap();
        let store = model.init(1);
        let report = count_params(&model).unwrap();
        assert_eq!(report.total_params(), store.num_scalars());
        for row in &report.rows {
            assert_eq!(row.params, store.num_scalars_under(&format!("{}.", row.layer)), "{}", row.layer);
        }
        assert_eq!(
            report.params_under("caga.0."),
            caga_param_count(&cfg.caga, cfg.stem_channels()).unwrap()
        );
    }

    #[test]
    fn csv_has_total() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let r = count_macs(&model, (32, 32)).unwrap();
        let csv = r.to_csv(false);
        assert!(csv.starts_with("layer,params,macs\n"));
        assert!(csv.ends_with(&format!("total,{},{}\n", r.total_params(), r.total_macs())));
        assert!(r.to_csv(true).contains(&format!("total,{},{}", r.total_params(), 2 * r.total_macs())));
    }
}
