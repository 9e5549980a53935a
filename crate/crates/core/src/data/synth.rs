//! Parametric texture classes for desk-scale runs.
//!
//! Class `c` of `n` draws oriented stripes at angle `c·π/n`, a class-specific
//! number of Gaussian blobs, a faint class tint, and pixel noise. Frequency,
//! phase and blob positions vary per sample. Sample `i` uses the stream
//! seeded with `seed ^ i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const STRIPE_AMPLITUDE: Real = 0.22;
const BLOB_AMPLITUDE: Real = 0.25;
const TINT: Real = 0.06;
const NOISE_STD: Real = 0.05;

fn tint(class: usize, num_classes: usize) -> [Real; 3] {
    let phase = 2.0 * std::f64::consts::PI as Real * class as Real / num_classes as Real;
    [
        TINT * phase.cos(),
        TINT * (phase + 2.0 * std::f64::consts::FRAC_PI_3 as Real).cos(),
        TINT * (phase + 4.0 * std::f64::consts::FRAC_PI_3 as Real).cos(),
    ]
}

fn render(class: usize, num_classes: usize, size: (usize, usize), rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = size;
    let pi = std::f64::consts::PI as Real;
    let angle = pi * class as Real / num_classes as Real + rng.gen_range(-0.1..0.1);
    let (sin, cos) = angle.sin_cos();
    let extent = h.max(w) as Real;
    let freq = 2.0 * pi * rng.gen_range(3.0..5.0) / extent;
    let phase = rng.gen_range(0.0..2.0 * pi);
    let blobs: Vec<(Real, Real, Real)> = (0..1 + 2 * class)
        .map(|_| {
            (
                rng.gen_range(0.0..h as Real),
                rng.gen_range(0.0..w as Real),
                extent * rng.gen_range(0.05..0.1),
            )
        })
        .collect();
    let tint = tint(class, num_classes);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let mut base = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let t = (x as Real * cos + y as Real * sin) * freq + phase;
            let mut v = 0.5 + STRIPE_AMPLITUDE * t.sin();
            for &(by, bx, r) in &blobs {
                let d2 = (y as Real - by).powi(2) + (x as Real - bx).powi(2);
                v += BLOB_AMPLITUDE * (-d2 / (2.0 * r * r)).exp();
            }
            base[y * w + x] = v;
        }
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for t in tint {
        for &b in &base {
            data.push((b + t + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![3, h, w], data).expect("synth shape")
}

/// `num_classes × per_class` samples of `[3, size.0, size.1]`, ordered by
/// class then index.
pub fn synth_dataset(num_classes: usize, per_class: usize, size: (usize, usize), seed: u64) -> Result<Dataset> {
    if !(2..=8).contains(&num_classes) {
        return Err(Error::Config(format!("synthetic classes must be in 2..=8, got {num_classes}")));
    }
    if per_class == 0 || size.0 == 0 || size.1 == 0 {
        return Err(Error::Config("synthetic dataset needs positive per-class count and size".into()));
    }
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        for j in 0..per_class {
            let index = (class * per_class + j) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index);
            samples.push(Sample {
                image: render(class, num_classes, size, &mut rng),
                label: class,
            });
        }
    }
    Ok(Dataset {
        samples,
        class_names: (0..num_classes).map(|c| format!("class{c}")).collect(),
        split: "all".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_dataset(4, 100, (32, 32), 82).unwrap();
        let b = synth_dataset(4, 100, (32, 32), 82).unwrap();
        assert_eq!(a.len(), 400);
        assert_eq!(a, b);
        for c in 0..4 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 100);
        }
        assert!(a.samples.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(a, synth_dataset(4, 100, (32, 32), 83).unwrap());
    }

    #[test]
    fn class_count_bounds() {
        assert!(synth_dataset(1, 4, (8, 8), 0).is_err());
        assert!(synth_dataset(9, 4, (8, 8), 0).is_err());
    }
}
