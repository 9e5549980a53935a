//! Layer primitives: dilated convolution, depthwise-separable convolution,
//! batch normalization, bilinear resizing, linear maps and Xavier init.

mod params;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use params::{Ctx, ParamStore};

use crate::error::{Error, Result};
use crate::tape::{BatchStats, NormMode, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Seed used for weight initialization unless overridden.
pub const DEFAULT_SEED: u64 = 82;

/// The seedable generator used for initialization and data shuffling.
pub type InitRng = ChaCha8Rng;

pub fn init_rng(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Span of a `k`-tap kernel with taps spaced `d` apart: `k + (k-1)(d-1)`.
pub fn effective_kernel_size(k: usize, d: usize) -> Result<usize> {
    if k == 0 || d == 0 {
        return Err(Error::Contract(format!(
            "kernel and dilation must be positive, got k={k}, d={d}"
        )));
    }
    Ok(k + (k - 1) * (d - 1))
}

/// Output extent of a valid (unpadded) dilated convolution:
/// `floor((extent - k_eff) / s) + 1`. When `extent - k_eff` is not a
/// multiple of `s` the trailing partial window is dropped.
pub fn dilated_output_extent(extent: usize, k: usize, d: usize, s: usize) -> Result<usize> {
    if s == 0 {
        return Err(Error::Contract("stride must be positive".into()));
    }
    let k_eff = effective_kernel_size(k, d)?;
    if extent < k_eff {
        return Err(Error::KernelTooLarge {
            extent,
            k_eff,
            context: None,
        });
    }
    Ok((extent - k_eff) / s + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Symmetric zero padding of `(k_eff - 1) / 2`; needs an odd `k_eff`.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    pub bias: bool,
    /// 1 for dense convolution, `in_channels` for depthwise.
    pub groups: usize,
}

impl ConvSpec {
    /// Dense, stride 1, dilation 1, valid padding, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            padding: Padding::Valid,
            bias: true,
            groups: 1,
        }
    }

    /// Per-channel `k×k` convolution with same padding.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec {
            groups: channels,
            padding: Padding::Same,
            ..Self::new(channels, channels, kernel)
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn same(mut self) -> Self {
        self.padding = Padding::Same;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn k_eff(&self) -> Result<usize> {
        effective_kernel_size(self.kernel, self.dilation)
    }

    pub fn pad(&self) -> Result<usize> {
        match self.padding {
            Padding::Valid => Ok(0),
            Padding::Same => {
                let k_eff = self.k_eff()?;
                if k_eff % 2 == 0 {
                    return Err(Error::Contract(format!(
                        "same padding needs an odd effective kernel, got {k_eff}"
                    )));
                }
                Ok((k_eff - 1) / 2)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.out_channels,
            self.kernel,
            self.stride,
            self.dilation,
            self.groups,
        ];
        if positive.contains(&0) {
            return Err(Error::Contract(format!("conv spec has a zero field: {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Contract(format!(
                "groups {} must divide channels {}→{}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        self.pad().map(|_| ())
    }

    /// Output extent for an input extent along one axis.
    pub fn output_extent(&self, extent: usize) -> Result<usize> {
        let pad = self.pad()?;
        dilated_output_extent(extent + 2 * pad, self.kernel, self.dilation, self.stride)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn param_count(&self) -> usize {
        let w: usize = self.weight_shape().iter().product();
        w + if self.bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulates for one `[C_in, h, w]` input (padding taps included).
    pub fn macs(&self, h: usize, w: usize) -> Result<usize> {
        let (oh, ow) = (self.output_extent(h)?, self.output_extent(w)?);
        Ok(self.kernel * self.kernel * (self.in_channels / self.groups) * self.out_channels * oh * ow)
    }
}

/// Applies `spec` to `[C_in, H, W]` or `[B, C_in, H, W]` input.
pub fn conv2d(tape: &mut Tape, x: Var, spec: &ConvSpec, w: Var, b: Option<Var>) -> Result<Var> {
    spec.validate()?;
    if spec.bias != b.is_some() {
        return Err(Error::Contract(format!(
            "conv spec bias={} but bias tensor {}",
            spec.bias,
            if b.is_some() { "given" } else { "missing" }
        )));
    }
    let shape = tape.shape(x).to_vec();
    let unbatched = shape.len() == 3;
    let x4 = if unbatched {
        tape.reshape(x, &[1, shape[0], shape[1], shape[2]])?
    } else {
        x
    };
    let xs = tape.shape(x4);
    if xs.len() != 4 || xs[1] != spec.in_channels {
        return Err(Error::shape("conv2d", &shape, &spec.weight_shape()));
    }
    if tape.shape(w) != spec.weight_shape() {
        return Err(Error::shape("conv2d weight", &spec.weight_shape(), tape.shape(w)));
    }
    let y = tape.conv2d(x4, w, b, spec.stride, spec.dilation, spec.pad()?, spec.groups)?;
    if unbatched {
        let ys = tape.shape(y).to_vec();
        tape.reshape(y, &ys[1..])
    } else {
        Ok(y)
    }
}

/// Depthwise `k×k` convolution followed by a 1×1 channel-mixing convolution.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_separable_conv(
    tape: &mut Tape,
    x: Var,
    depthwise: &ConvSpec,
    dw_w: Var,
    dw_b: Option<Var>,
    pointwise: &ConvSpec,
    pw_w: Var,
    pw_b: Option<Var>,
) -> Result<Var> {
    if depthwise.groups != depthwise.in_channels || depthwise.padding != Padding::Same {
        return Err(Error::Contract(
            "depthwise stage must be per-channel with same padding".into(),
        ));
    }
    if pointwise.kernel != 1 || pointwise.in_channels != depthwise.out_channels {
        return Err(Error::Contract("pointwise stage must be a matching 1×1 conv".into()));
    }
    let h = conv2d(tape, x, depthwise, dw_w, dw_b)?;
    conv2d(tape, h, pointwise, pw_w, pw_b)
}

/// Xavier/Glorot uniform samples on `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as Real).sqrt();
    // closed interval: sample [0,1] scaled, keeps ±a reachable
    Tensor::from_fn(shape, |_| (rng.gen::<Real>() * 2.0 - 1.0) * a)
}

/// Align-corners-false bilinear resize of the last two axes to `target`.
pub fn interpolate_bilinear(tape: &mut Tape, x: Var, target: (usize, usize)) -> Result<Var> {
    tape.interpolate(x, target.0, target.1)
}

/// Running statistics and hyper-parameters of one batch-norm layer. The
/// affine scale and shift are ordinary trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<Real>,
    pub running_var: Vec<Real>,
    pub momentum: Real,
    pub eps: Real,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`, where the
    /// batch variance is the unbiased estimate `var * n / (n - 1)`.
    pub fn update(&mut self, stats: &BatchStats) {
        update_running(
            &mut self.running_mean,
            &mut self.running_var,
            stats,
            self.momentum,
        );
    }
}

fn update_running(mean: &mut [Real], var: &mut [Real], stats: &BatchStats, momentum: Real) {
    let n = stats.count as Real;
    let unbias = n / (n - 1.0);
    for (m, &b) in mean.iter_mut().zip(&stats.mean) {
        *m = (1.0 - momentum) * *m + momentum * b;
    }
    for (v, &b) in var.iter_mut().zip(&stats.var) {
        *v = (1.0 - momentum) * *v + momentum * b * unbias;
    }
}

/// Batch normalization over `[B, C, H, W]` (channel axis 1). Training mode
/// uses batch statistics and folds them into `state`; eval mode uses the
/// running statistics.
pub fn batchnorm2d(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut BatchNormState,
    training: bool,
) -> Result<Var> {
    let c = tape.shape(x).get(1).copied().unwrap_or(0);
    if c != state.running_mean.len() {
        return Err(Error::shape("batchnorm2d", tape.shape(x), &[state.running_mean.len()]));
    }
    if training {
        let (y, stats) = tape.batch_norm(x, gamma, beta, NormMode::Batch { eps: state.eps })?;
        state.update(&stats.expect("batch mode returns stats"));
        Ok(y)
    } else {
        let mode = NormMode::Fixed {
            mean: &state.running_mean,
            var: &state.running_var,
            eps: state.eps,
        };
        Ok(tape.batch_norm(x, gamma, beta, mode)?.0)
    }
}

// ----- parameterized layers over a ParamStore -------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Self {
        Conv2d {
            name: name.into(),
            spec,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        let shape = self.spec.weight_shape();
        let receptive = self.spec.kernel * self.spec.kernel;
        let w = xavier_uniform(&shape, shape[1] * receptive, shape[0] * receptive, rng);
        store.insert(self.weight_name(), w);
        if self.spec.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.spec.out_channels]));
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let b = if self.spec.bias {
            Some(ctx.param(&self.bias_name())?)
        } else {
            None
        };
        conv2d(&mut ctx.tape, x, &self.spec, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }
}

/// Depthwise `k×k` (same padding, bias) then pointwise 1×1 (bias).
#[derive(Clone, Debug, PartialEq)]
pub struct DsConv {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl DsConv {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        DsConv {
            depthwise: Conv2d::new(format!("{name}.dw"), ConvSpec::depthwise(in_channels, kernel)),
            pointwise: Conv2d::new(format!("{name}.pw"), ConvSpec::new(in_channels, out_channels, 1)),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        self.depthwise.init(store, rng);
        self.pointwise.init(store, rng);
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let dw_w = ctx.param(&self.depthwise.weight_name())?;
        let dw_b = ctx.param(&self.depthwise.bias_name())?;
        let pw_w = ctx.param(&self.pointwise.weight_name())?;
        let pw_b = ctx.param(&self.pointwise.bias_name())?;
        depthwise_separable_conv(
            &mut ctx.tape,
            x,
            &self.depthwise.spec,
            dw_w,
            Some(dw_b),
            &self.pointwise.spec,
            pw_w,
            Some(pw_b),
        )
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub momentum: Real,
    pub eps: Real,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let defaults = BatchNormState::new(0);
        BatchNorm2d {
            name: name.into(),
            channels,
            momentum: defaults.momentum,
            eps: defaults.eps,
        }
    }

    fn key(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(self.key("gamma"), Tensor::ones(&[self.channels]));
        store.insert(self.key("beta"), Tensor::zeros(&[self.channels]));
        store.insert_buffer(self.key("running_mean"), Tensor::zeros(&[self.channels]));
        store.insert_buffer(self.key("running_var"), Tensor::ones(&[self.channels]));
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.param(&self.key("gamma"))?;
        let beta = ctx.param(&self.key("beta"))?;
        if ctx.training {
            let (y, stats) = ctx
                .tape
                .batch_norm(x, gamma, beta, NormMode::Batch { eps: self.eps })?;
            ctx.record_bn(&self.name, stats.expect("batch mode returns stats"));
            Ok(y)
        } else {
            let store = ctx.store();
            let mean = store.buffer(&self.key("running_mean"))?.data().to_vec();
            let var = store.buffer(&self.key("running_var"))?.data().to_vec();
            let mode = NormMode::Fixed {
                mean: &mean,
                var: &var,
                eps: self.eps,
            };
            Ok(ctx.tape.batch_norm(x, gamma, beta, mode)?.0)
        }
    }

    /// Folds batch statistics into the stored running statistics.
    pub fn apply_update(&self, store: &mut ParamStore, stats: &BatchStats) -> Result<()> {
        let mut mean = store.buffer(&self.key("running_mean"))?.clone();
        let mut var = store.buffer(&self.key("running_var"))?.clone();
        update_running(mean.data_mut(), var.data_mut(), stats, self.momentum);
        *store.buffer_mut(&self.key("running_mean"))? = mean;
        *store.buffer_mut(&self.key("running_var"))? = var;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// `y = x · W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Linear {
            name: name.into(),
            in_features,
            out_features,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        let w = xavier_uniform(
            &[self.in_features, self.out_features],
            self.in_features,
            self.out_features,
            rng,
        );
        store.insert(format!("{}.weight", self.name), w);
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_features]));
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_along(y, b, 1)
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    pub fn macs(&self) -> usize {
        self.in_features * self.out_features
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_kernel_examples() {
        assert_eq!(effective_kernel_size(3, 1).unwrap(), 3);
        assert_eq!(effective_kernel_size(3, 3).unwrap(), 7);
        assert_eq!(effective_kernel_size(5, 2).unwrap(), 9);
        assert!(effective_kernel_size(0, 1).is_err());
        assert!(effective_kernel_size(3, 0).is_err());
    }

    #[test]
    fn output_extent_examples() {
        assert_eq!(dilated_output_extent(14, 3, 1, 1).unwrap(), 12);
        assert_eq!(dilated_output_extent(14, 3, 3, 1).unwrap(), 8);
        assert_eq!(dilated_output_extent(8, 3, 3, 1).unwrap(), 2);
        let err = dilated_output_extent(6, 3, 3, 1).unwrap_err();
        assert!(err.to_string().contains("kernel larger than input"), "{err}");
    }

    #[test]
    fn same_padding_requires_odd_span() {
        assert_eq!(ConvSpec::new(1, 1, 3).dilation(2).same().pad().unwrap(), 2);
        assert!(ConvSpec::new(1, 1, 2).same().pad().is_err());
    }

    #[test]
    fn xavier_bound_and_determinism() {
        let a = xavier_uniform(&[1000], 3, 3, &mut init_rng(82));
        let b = xavier_uniform(&[1000], 3, 3, &mut init_rng(82));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn xavier_mean_near_zero() {
        let t = xavier_uniform(&[100_000], 3, 3, &mut init_rng(82));
        assert!((t.sum() / t.numel() as Real).abs() < 0.01);
    }

    #[test]
    fn batchnorm_running_update_matches_momentum_formula() {
        let mut tape = Tape::new();
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| ((i * 37) % 11) as Real * 0.3 - 1.0);
        let xv = tape.constant(x.clone());
        let g = tape.param(Tensor::ones(&[2]));
        let b = tape.param(Tensor::zeros(&[2]));
        let mut st = BatchNormState::new(2);
        st.running_mean = vec![0.5, -0.5];
        st.running_var = vec![2.0, 0.5];
        batchnorm2d(&mut tape, xv, g, b, &mut st, true).unwrap();
        for c in 0..2 {
            let vals: Vec<Real> = (0..3)
                .flat_map(|bi| (0..4).map(move |p| (bi, p)))
                .map(|(bi, p)| x.data()[(bi * 2 + c) * 4 + p])
                .collect();
            let n = vals.len() as Real;
            let m = vals.iter().sum::<Real>() / n;
            let unbiased = vals.iter().map(|v| (v - m).powi(2)).sum::<Real>() / (n - 1.0);
            let init_m = [0.5, -0.5][c];
            let init_v = [2.0, 0.5][c];
            assert!((st.running_mean[c] - (0.9 * init_m + 0.1 * m)).abs() < 1e-12);
            assert!((st.running_var[c] - (0.9 * init_v + 0.1 * unbiased)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_degenerate_batch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
        let g = tape.param(Tensor::ones(&[2]));
        let b = tape.param(Tensor::zeros(&[2]));
        let mut st = BatchNormState::new(2);
        assert!(matches!(
            batchnorm2d(&mut tape, x, g, b, &mut st, true),
            Err(Error::DegenerateBatch(1))
        ));
    }

    #[test]
    fn dsconv_is_cheaper_than_dense() {
        for cin in 1..20 {
            for cout in 2..20 {
                for k in 2..6 {
                    let ds = DsConv::new("x", cin, cout, k | 1);
                    let dense = ConvSpec::new(cin, cout, k | 1);
                    assert!(ds.param_count() < dense.param_count(), "{cin} {cout} {k}");
                }
            }
        }
    }
}
