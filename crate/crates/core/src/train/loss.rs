use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FocalLossConfig {
    pub gamma: Real,
    /// Per-class weights.
    pub alpha: Vec<Real>,
}

impl FocalLossConfig {
    /// γ = 2 with uniform class weights.
    pub fn uniform(num_classes: usize) -> Self {
        FocalLossConfig {
            gamma: 2.0,
            alpha: vec![1.0; num_classes],
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if self.alpha.len() != num_classes {
            return Err(Error::Config(format!(
                "focal alpha has {} weights for {num_classes} classes",
                self.alpha.len()
            )));
        }
        if self.alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config("focal alpha weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Batch mean of `-α_t (1 - p_t)^γ log p_t`, with `p_t` the softmax
/// probability of the target class. `logits` is `[B, C]`.
pub fn focal_loss(tape: &mut Tape, logits: Var, targets: &[usize], cfg: &FocalLossConfig) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape("focal_loss", &shape, &[targets.len()]));
    }
    let c = shape[1];
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Contract(format!("target {t} out of range for {c} classes")));
    }
    cfg.validate(c)?;
    let log_p = tape.log_softmax(logits)?;
    let log_pt = tape.gather(log_p, targets)?;
    let pt = tape.exp(log_pt);
    let neg = tape.scale(pt, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let modulator = tape.pow(one_minus, cfg.gamma);
    let weighted = tape.mul(modulator, log_pt)?;
    let alpha_t = Tensor::new(
        vec![targets.len()],
        targets.iter().map(|&t| cfg.alpha[t]).collect(),
    )?;
    let alpha_t = tape.constant(alpha_t);
    let weighted = tape.mul(weighted, alpha_t)?;
    let mean = tape.mean(weighted);
    Ok(tape.scale(mean, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(logits: Tensor, targets: &[usize], cfg: &FocalLossConfig) -> Real {
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let loss = focal_loss(&mut tape, l, targets, cfg).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn two_class_uniform_logits() {
        let cfg = FocalLossConfig::uniform(2);
        let v = eval(Tensor::zeros(&[1, 2]), &[0], &cfg);
        assert!((v - 0.25 * (2.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_prediction_has_no_loss() {
        let cfg = FocalLossConfig::uniform(3);
        let v = eval(Tensor::new(vec![1, 3], vec![60.0, 0.0, 0.0]).unwrap(), &[0], &cfg);
        assert!(v.abs() < 1e-20);
    }

    #[test]
    fn out_of_range_target() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 2]));
        let err = focal_loss(&mut tape, l, &[2], &FocalLossConfig::uniform(2));
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
