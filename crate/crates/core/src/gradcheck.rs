//! Central finite-difference gradient checking.
//!
//! The function under test receives a fresh [`Tape`] and one leaf per input
//! tensor and returns a tensor-valued output. The checker contracts that
//! output with fixed pseudo-random weights to get a scalar, so every output
//! element participates with a distinct coefficient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: Real = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: Real,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: Real,
    /// Cap on probed elements per input; `None` probes all of them.
    pub max_per_input: Option<usize>,
    pub seed: u64,
    /// Op whose backward rule is deliberately broken (self-test mutation).
    pub fault: Option<&'static str>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            max_per_input: None,
            seed: 7,
            fault: None,
        }
    }
}

pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

impl GradCheck {
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut weights: Option<Tensor> = None;
        let mut scalar_loss = |inputs: &[Tensor], fault: Option<&'static str>| -> Result<(Tape, Var, Vec<Var>)> {
            let mut tape = Tape::new();
            tape.inject_fault(fault);
            let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            let shape = tape.shape(out).to_vec();
            let w = weights
                .get_or_insert_with(|| Tensor::uniform(&shape, 0.5, 1.5, &mut rng))
                .clone();
            let w = tape.constant(w.reshape(&shape)?);
            let prod = tape.mul(out, w)?;
            let loss = tape.sum(prod);
            Ok((tape, loss, vars))
        };

        let (mut tape, loss, vars) = scalar_loss(inputs, self.fault)?;
        tape.backward(loss)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let mut pick = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            checked: 0,
        };
        let mut probe = inputs.to_vec();
        for (ti, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let indices: Vec<usize> = match self.max_per_input {
                Some(cap) if cap < n => {
                    let mut v = sample(&mut pick, n, cap).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            };
            for idx in indices {
                let orig = input.data()[idx];
                probe[ti].data_mut()[idx] = orig + self.step;
                let (tp, lp, _) = scalar_loss(&probe, None)?;
                probe[ti].data_mut()[idx] = orig - self.step;
                let (tm, lm, _) = scalar_loss(&probe, None)?;
                probe[ti].data_mut()[idx] = orig;
                let numeric =
                    (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * self.step);
                let err = relative_error(analytic[ti].data()[idx], numeric);
                if !err.is_finite() {
                    return Err(Error::Numeric {
                        op: "gradcheck",
                        msg: format!("non-finite error at input {ti} element {idx}"),
                    });
                }
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = (ti, idx);
                }
                report.checked += 1;
            }
        }
        Ok(report)
    }
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// One differentiable op applied to fixed random inputs.
pub struct OpCase {
    /// Tape op name exercised by the case.
    pub op: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

impl OpCase {
    fn new(
        op: &'static str,
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        OpCase {
            op,
            inputs,
            f: Box::new(f),
        }
    }
}

/// Values in ±[0.1, 1], away from the ReLU kink.
fn signed<R: rand::Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: Real = rng.gen_range(0.1..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Every differentiable tape op on random inputs whose spatial extents are
/// drawn from `[4, max_extent]`.
pub fn op_suite(seed: u64, max_extent: usize) -> Vec<OpCase> {
    use crate::tape::NormMode;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let ext = |r: &mut ChaCha8Rng| rand::Rng::gen_range(r, 4..=max_extent.max(4));
    let (h, w) = (ext(r), ext(r));
    let (h2, w2) = (ext(r), ext(r));
    let u = |s: &[usize], r: &mut ChaCha8Rng| Tensor::uniform(s, -1.0, 1.0, r);
    let pos = |s: &[usize], r: &mut ChaCha8Rng| Tensor::uniform(s, 0.5, 2.0, r);
    vec![
        OpCase::new("add", vec![u(&[3, 4], r), u(&[3, 4], r)], |t, v| t.add(v[0], v[1])),
        OpCase::new("sub", vec![u(&[3, 4], r), u(&[3, 4], r)], |t, v| t.sub(v[0], v[1])),
        OpCase::new("mul", vec![u(&[3, 4], r), u(&[3, 4], r)], |t, v| t.mul(v[0], v[1])),
        OpCase::new("scale", vec![u(&[5], r)], |t, v| Ok(t.scale(v[0], -1.7))),
        OpCase::new("add_scalar", vec![u(&[5], r)], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        OpCase::new("add_along", vec![u(&[2, 3, 4], r), u(&[3], r)], |t, v| t.add_along(v[0], v[1], 1)),
        OpCase::new("mul_along", vec![u(&[2, 3, 4], r), u(&[3], r)], |t, v| t.mul_along(v[0], v[1], 1)),
        OpCase::new("matmul", vec![u(&[3, 5], r), u(&[5, 2], r)], |t, v| t.matmul(v[0], v[1])),
        OpCase::new("matmul", vec![u(&[2, 3, 5], r), u(&[2, 5, 4], r)], |t, v| t.matmul(v[0], v[1])),
        OpCase::new("softmax", vec![u(&[3, 6], r)], |t, v| t.softmax(v[0])),
        OpCase::new("log_softmax", vec![u(&[3, 6], r)], |t, v| t.log_softmax(v[0])),
        OpCase::new("reshape", vec![u(&[2, 6], r)], |t, v| t.reshape(v[0], &[3, 4])),
        OpCase::new("permute", vec![u(&[2, 3, 4], r)], |t, v| t.permute(v[0], &[2, 0, 1])),
        OpCase::new("concat", vec![u(&[2, 3], r), u(&[2, 2], r)], |t, v| t.concat(&[v[0], v[1]], 1)),
        OpCase::new("slice", vec![u(&[3, 5], r)], |t, v| t.slice(v[0], 1, 1, 3)),
        OpCase::new("sum", vec![u(&[3, 4], r)], |t, v| Ok(t.sum(v[0]))),
        OpCase::new("mean", vec![u(&[3, 4], r)], |t, v| Ok(t.mean(v[0]))),
        OpCase::new("sum_axis", vec![u(&[3, 4, 2], r)], |t, v| t.sum_axis(v[0], 1)),
        OpCase::new("mean_axis", vec![u(&[3, 4, 2], r)], |t, v| t.mean_axis(v[0], 2)),
        OpCase::new("log", vec![pos(&[7], r)], |t, v| Ok(t.log(v[0]))),
        OpCase::new("exp", vec![u(&[7], r)], |t, v| Ok(t.exp(v[0]))),
        OpCase::new("pow", vec![pos(&[7], r)], |t, v| Ok(t.pow(v[0], 2.5))),
        OpCase::new("relu", vec![signed(&[9], r)], |t, v| Ok(t.relu(v[0]))),
        OpCase::new("gather", vec![u(&[4, 3], r)], |t, v| t.gather(v[0], &[2, 0, 1, 2])),
        OpCase::new("conv2d", vec![u(&[2, 4, h, w], r), u(&[6, 2, 3, 3], r), u(&[6], r)], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 2, 2, 2)
        }),
        OpCase::new("conv2d", vec![u(&[1, 3, h2, w2], r), u(&[4, 3, 3, 3], r)], |t, v| {
            t.conv2d(v[0], v[1], None, 2, 1, 0, 1)
        }),
        OpCase::new("batchnorm", vec![u(&[3, 2, h, w], r), pos(&[2], r), u(&[2], r)], |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], NormMode::Batch { eps: 1e-5 })?.0)
        }),
        OpCase::new("batchnorm", vec![u(&[2, 2, 3, 3], r), pos(&[2], r), u(&[2], r)], |t, v| {
            let (mean, var) = ([0.1, -0.2], [0.5, 1.5]);
            Ok(t.batch_norm(v[0], v[1], v[2], NormMode::Fixed { mean: &mean, var: &var, eps: 1e-5 })?.0)
        }),
        OpCase::new("interpolate", vec![u(&[1, 2, h, w], r)], move |t, v| t.interpolate(v[0], h2, w2)),
    ]
}
