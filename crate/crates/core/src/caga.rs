//! Cascaded Atrous Attention (per head), Cascaded Group Attention (across
//! heads) and the full CAGA block.
//!
//! Per head, each dilation rate `d` runs a valid dilated `k×k` convolution
//! to `3·d_qkv` channels, a 1×1 mixing convolution, and spatial
//! self-attention over the `H̃·W̃` positions of that rate. With dilation
//! cascading on, the attention map of rate `d-1` is projected 1×1 to the
//! head width, resized to `(H, W)` and added to the input of rate `d`. All
//! per-rate maps are resized to `(H, W)`, concatenated and projected back to
//! the head width.
//!
//! Across heads, head `i > 0` sees its channel slice plus the output of head
//! `i - 1` when head cascading is on. The head outputs are concatenated,
//! projected 1×1 and added to the block input. The block wraps this with a
//! depthwise-separable input conv and a trailing batch norm.

use crate::error::{Error, Result};
use crate::nn::{
    dilated_output_extent, effective_kernel_size, interpolate_bilinear, BatchNorm2d, Conv2d,
    ConvSpec, Ctx, DsConv, InitRng, ParamStore,
};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// Kernel of the depthwise stage of the block's input projection.
pub const DSCONV_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaaConfig {
    pub head_dim: usize,
    pub d_qkv: usize,
    /// Strictly increasing dilation rates, applied in order.
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub cascade_dilations: bool,
}

impl Default for CaaConfig {
    fn default() -> Self {
        CaaConfig {
            head_dim: 16,
            d_qkv: 8,
            dilations: vec![1, 2, 3],
            kernel: 3,
            stride: 1,
            cascade_dilations: true,
        }
    }
}

impl CaaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.d_qkv == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(
                "head_dim, d_qkv, kernel and stride must be positive".into(),
            ));
        }
        if self.dilations.is_empty() {
            return Err(Error::Config("at least one dilation rate is required".into()));
        }
        if self.dilations[0] == 0 || self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "dilations must be positive and strictly increasing, got {:?}",
                self.dilations
            )));
        }
        Ok(())
    }

    /// Largest effective kernel over all dilation rates.
    pub fn max_k_eff(&self) -> Result<usize> {
        let d = *self.dilations.last().ok_or_else(|| Error::Config("no dilations".into()))?;
        effective_kernel_size(self.kernel, d)
    }

    /// Reduced spatial extents `(H̃, W̃)` of the branch with dilation `d`.
    pub fn branch_extent(&self, d: usize, h: usize, w: usize) -> Result<(usize, usize)> {
        let wrap = |e: Error| match e {
            Error::KernelTooLarge { extent, k_eff, .. } => Error::KernelTooLarge {
                extent,
                k_eff,
                context: Some(format!("dilation {d}")),
            },
            other => other,
        };
        Ok((
            dilated_output_extent(h, self.kernel, d, self.stride).map_err(wrap)?,
            dilated_output_extent(w, self.kernel, d, self.stride).map_err(wrap)?,
        ))
    }

    fn qkv_spec(&self, d: usize) -> ConvSpec {
        ConvSpec::new(self.head_dim, 3 * self.d_qkv, self.kernel)
            .dilation(d)
            .stride(self.stride)
            .bias(false)
    }

    fn mix_spec(&self) -> ConvSpec {
        ConvSpec::new(3 * self.d_qkv, 3 * self.d_qkv, 1).bias(false)
    }

    fn cascade_spec(&self) -> ConvSpec {
        ConvSpec::new(self.d_qkv, self.head_dim, 1)
    }

    fn out_spec(&self) -> ConvSpec {
        ConvSpec::new(self.dilations.len() * self.d_qkv, self.head_dim, 1)
    }

    /// Trainable scalars of one head, in closed form.
    pub fn param_count(&self) -> usize {
        let (h, d, k) = (self.head_dim, self.d_qkv, self.kernel);
        let l = self.dilations.len();
        let qkv = l * (3 * d * h * k * k);
        let mix = l * (3 * d) * (3 * d);
        let cascade = if self.cascade_dilations {
            (l - 1) * (d * h + h)
        } else {
            0
        };
        let out = l * d * h + h;
        qkv + mix + cascade + out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CagaConfig {
    pub num_heads: usize,
    pub caa: CaaConfig,
    pub cascade_heads: bool,
}

impl Default for CagaConfig {
    fn default() -> Self {
        CagaConfig {
            num_heads: 3,
            caa: CaaConfig::default(),
            cascade_heads: true,
        }
    }
}

impl CagaConfig {
    pub fn channels(&self) -> usize {
        self.num_heads * self.caa.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::Config("num_heads must be at least 1".into()));
        }
        self.caa.validate()
    }
}

/// Closed-form trainable parameter count of a CAGA block fed with
/// `in_channels` channels.
pub fn caga_param_count(cfg: &CagaConfig, in_channels: usize) -> Result<usize> {
    cfg.validate()?;
    let c = cfg.channels();
    let k = DSCONV_KERNEL;
    let dsconv = in_channels * k * k + in_channels + in_channels * c + c;
    let heads = cfg.num_heads * cfg.caa.param_count();
    let proj = c * c + c;
    let bn = 2 * c;
    Ok(dsconv + heads + proj + bn)
}

/// Per-branch query/key/value matrices, each `[d_qkv, S]` (or batched
/// `[B, d_qkv, S]`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionTriple {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

impl AttentionTriple {
    fn check(&self, tape: &Tape) -> Result<()> {
        let qs = tape.shape(self.q);
        if qs.len() < 2 || tape.shape(self.k) != qs || tape.shape(self.v) != qs {
            return Err(Error::shape("attention", qs, tape.shape(self.k)));
        }
        Ok(())
    }
}

/// Spatial self-attention: position `j` of the output is
/// `Σ_i V[:, i] · softmax_i(Q[:, j] · K[:, i] / sqrt(d_qkv))`.
/// Returns the output and the row-stochastic `[S, S]` weights (query rows).
pub fn scaled_dot_attention_weights(tape: &mut Tape, t: &AttentionTriple) -> Result<(Var, Var)> {
    t.check(tape)?;
    let shape = tape.shape(t.q);
    let d = shape[shape.len() - 2];
    let qt = tape.transpose(t.q)?;
    let logits = tape.matmul(qt, t.k)?;
    let logits = tape.scale(logits, 1.0 / (d as Real).sqrt());
    let weights = tape.softmax(logits)?;
    let wt = tape.transpose(weights)?;
    let out = tape.matmul(t.v, wt)?;
    if !tape.value(out).is_finite() {
        return Err(Error::Numeric {
            op: "scaled_dot_attention",
            msg: "non-finite attention output".into(),
        });
    }
    Ok((out, weights))
}

pub fn scaled_dot_attention(tape: &mut Tape, t: &AttentionTriple) -> Result<Var> {
    scaled_dot_attention_weights(tape, t).map(|(out, _)| out)
}

/// Intermediate values of one head's forward pass.
#[derive(Clone, Debug, Default)]
pub struct CaaTrace {
    /// Attention weights per dilation, `[B, S, S]`.
    pub weights: Vec<Var>,
    /// Attention maps per dilation at reduced resolution, `[B, d_qkv, H̃, W̃]`.
    pub maps: Vec<Var>,
}

/// One Cascaded Atrous Attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct CaaHead {
    pub name: String,
    pub cfg: CaaConfig,
    qkv: Vec<Conv2d>,
    mix: Vec<Conv2d>,
    /// `cascade[j]` projects the map of rate `j` into the input of rate `j+1`.
    cascade: Vec<Conv2d>,
    out: Conv2d,
}

impl CaaHead {
    pub fn new(name: impl Into<String>, cfg: CaaConfig) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let l = cfg.dilations.len();
        let qkv = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(j, &d)| Conv2d::new(format!("{name}.dil{j}.qkv"), cfg.qkv_spec(d)))
            .collect();
        let mix = (0..l)
            .map(|j| Conv2d::new(format!("{name}.dil{j}.mix"), cfg.mix_spec()))
            .collect();
        let cascade = if cfg.cascade_dilations {
            (0..l - 1)
                .map(|j| Conv2d::new(format!("{name}.dil{j}.cascade"), cfg.cascade_spec()))
                .collect()
        } else {
            Vec::new()
        };
        let out = Conv2d::new(format!("{name}.proj"), cfg.out_spec());
        Ok(CaaHead {
            name,
            cfg,
            qkv,
            mix,
            cascade,
            out,
        })
    }

    fn layers(&self) -> impl Iterator<Item = &Conv2d> {
        self.qkv
            .iter()
            .chain(&self.mix)
            .chain(&self.cascade)
            .chain(std::iter::once(&self.out))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        for layer in self.layers() {
            layer.init(store, rng);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Conv2d::param_count).sum()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        self.forward_traced(ctx, x).map(|(y, _)| y)
    }

    /// `[B, h, H, W] → [B, h, H, W]`.
    pub fn forward_traced(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<(Var, CaaTrace)> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.head_dim {
            return Err(Error::shape("caa_forward", &shape, &[self.cfg.head_dim]));
        }
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let extents: Vec<(usize, usize)> = self
            .cfg
            .dilations
            .iter()
            .map(|&d| self.cfg.branch_extent(d, h, w))
            .collect::<Result<_>>()?;
        let dq = self.cfg.d_qkv;
        let mut trace = CaaTrace::default();
        let mut restored = Vec::with_capacity(extents.len());
        let mut prev: Option<Var> = None;
        for (j, &(rh, rw)) in extents.iter().enumerate() {
            let branch_in = match (prev, self.cascade.get(j.wrapping_sub(1))) {
                (Some(map), Some(proj)) => {
                    let p = proj.forward(ctx, map)?;
                    let p = interpolate_bilinear(&mut ctx.tape, p, (h, w))?;
                    ctx.tape.add(x, p)?
                }
                _ => x,
            };
            let qkv = self.qkv[j].forward(ctx, branch_in)?;
            let qkv = self.mix[j].forward(ctx, qkv)?;
            let s = rh * rw;
            let flat = ctx.tape.reshape(qkv, &[b, 3 * dq, s])?;
            let triple = AttentionTriple {
                q: ctx.tape.slice(flat, 1, 0, dq)?,
                k: ctx.tape.slice(flat, 1, dq, dq)?,
                v: ctx.tape.slice(flat, 1, 2 * dq, dq)?,
            };
            let (attn, weights) = scaled_dot_attention_weights(&mut ctx.tape, &triple)?;
            let map = ctx.tape.reshape(attn, &[b, dq, rh, rw])?;
            restored.push(interpolate_bilinear(&mut ctx.tape, map, (h, w))?);
            trace.weights.push(weights);
            trace.maps.push(map);
            prev = Some(map);
        }
        let cat = ctx.tape.concat(&restored, 1)?;
        let y = self.out.forward(ctx, cat)?;
        Ok((y, trace))
    }
}

/// The full block: DSConv → cascaded group attention (with residual) → BN.
#[derive(Clone, Debug, PartialEq)]
pub struct CagaBlock {
    pub name: String,
    pub in_channels: usize,
    pub cfg: CagaConfig,
    pub dsconv: DsConv,
    pub heads: Vec<CaaHead>,
    pub proj: Conv2d,
    pub bn: BatchNorm2d,
}

impl CagaBlock {
    pub fn new(name: impl Into<String>, in_channels: usize, cfg: CagaConfig) -> Result<Self> {
        cfg.validate()?;
        if in_channels == 0 {
            return Err(Error::Config("block input needs at least one channel".into()));
        }
        let name = name.into();
        let c = cfg.channels();
        let heads = (0..cfg.num_heads)
            .map(|i| CaaHead::new(format!("{name}.head{i}"), cfg.caa.clone()))
            .collect::<Result<_>>()?;
        Ok(CagaBlock {
            dsconv: DsConv::new(&format!("{name}.dsconv"), in_channels, c, DSCONV_KERNEL),
            heads,
            proj: Conv2d::new(format!("{name}.proj"), ConvSpec::new(c, c, 1)),
            bn: BatchNorm2d::new(format!("{name}.bn"), c),
            name,
            in_channels,
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        self.dsconv.init(store, rng);
        for head in &self.heads {
            head.init(store, rng);
        }
        self.proj.init(store, rng);
        self.bn.init(store);
    }

    pub fn param_count(&self) -> usize {
        self.dsconv.param_count()
            + self.heads.iter().map(CaaHead::param_count).sum::<usize>()
            + self.proj.param_count()
            + self.bn.param_count()
    }

    /// Cascaded group attention with residual: `[B, n·h, H, W] → same`.
    pub fn cga_forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let c = self.cfg.channels();
        if shape.len() != 4 || shape[1] != c {
            return Err(Error::Config(format!(
                "cascaded group attention expects {c} channels ({} heads × {}), got shape {shape:?}",
                self.cfg.num_heads, self.cfg.caa.head_dim
            )));
        }
        let hd = self.cfg.caa.head_dim;
        let mut outs = Vec::with_capacity(self.heads.len());
        for (i, head) in self.heads.iter().enumerate() {
            let mut xi = ctx.tape.slice(x, 1, i * hd, hd)?;
            if self.cfg.cascade_heads {
                if let Some(&prev) = outs.last() {
                    xi = ctx.tape.add(xi, prev)?;
                }
            }
            outs.push(head.forward(ctx, xi)?);
        }
        let cat = ctx.tape.concat(&outs, 1)?;
        let p = self.proj.forward(ctx, cat)?;
        ctx.tape.add(x, p)
    }

    /// `[B, C_in, H, W] → [B, n·h, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let z = self.dsconv.forward(ctx, x)?;
        let z = self.cga_forward(ctx, z)?;
        self.bn.forward(ctx, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_rng;
    use crate::tensor::Tensor;

    fn small() -> CagaConfig {
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

    #[test]
    fn rejects_bad_dilation_lists() {
        let mut cfg = CagaConfig::default();
        cfg.caa.dilations = vec![];
        assert!(caga_param_count(&cfg, 32).is_err());
        cfg.caa.dilations = vec![2, 1];
        assert!(cfg.validate().is_err());
        cfg.caa.dilations = vec![1, 1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn closed_form_matches_layers() {
        for cascade_dilations in [false, true] {
            let mut cfg = small();
            cfg.caa.cascade_dilations = cascade_dilations;
            let block = CagaBlock::new("b", 5, cfg.clone()).unwrap();
            assert_eq!(block.param_count(), caga_param_count(&cfg, 5).unwrap());
        }
    }

    #[test]
    fn too_small_input_names_dilation() {
        let cfg = CagaConfig::default();
        let block = CagaBlock::new("b", 3, cfg).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut init_rng(1));
        let mut ctx = Ctx::eval(&store);
        let x = ctx.input(Tensor::zeros(&[1, 3, 6, 6]));
        let err = block.forward(&mut ctx, x).unwrap_err().to_string();
        assert!(err.contains("dilation 3"), "{err}");
    }
}
