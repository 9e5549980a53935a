//! Image augmentation on `[3, H, W]` tensors with values in [0, 1].
//!
//! Geometric: reflection, quarter-turn rotation, and one affine warp that
//! combines small-angle rotation, translation, shear and scaling (inverse
//! mapped, bilinear, border-replicated). Photometric: hue and saturation
//! jitter in HSV, contrast, brightness and Gaussian noise. Every output is
//! clamped to [0, 1].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    /// Probability with which each enabled transform fires.
    pub prob: Real,
    pub hflip: bool,
    pub vflip: bool,
    /// Random quarter turns (square images only).
    pub rot90: bool,
    /// Max absolute rotation of the affine warp, degrees.
    pub rotate_deg: Real,
    /// Max absolute shift as a fraction of the image extent.
    pub translate_frac: Real,
    pub shear_deg: Real,
    /// Scale drawn from `[1 - scale, 1 + scale]`.
    pub scale: Real,
    /// Hue shift drawn from `[-hue, hue]` turns.
    pub hue: Real,
    /// Saturation factor drawn from `[1 - saturation, 1 + saturation]`.
    pub saturation: Real,
    pub contrast: Real,
    /// Additive brightness drawn from `[-brightness, brightness]`.
    pub brightness: Real,
    pub noise_std: Real,
}

impl AugmentPolicy {
    /// Leaves every image unchanged.
    pub fn identity() -> Self {
        AugmentPolicy {
            prob: 0.0,
            hflip: false,
            vflip: false,
            rot90: false,
            rotate_deg: 0.0,
            translate_frac: 0.0,
            shear_deg: 0.0,
            scale: 0.0,
            hue: 0.0,
            saturation: 0.0,
            contrast: 0.0,
            brightness: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.prob == 0.0 || *self == AugmentPolicy { prob: self.prob, ..Self::identity() }
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            prob: 0.5,
            hflip: true,
            vflip: false,
            rot90: false,
            rotate_deg: 10.0,
            translate_frac: 0.05,
            shear_deg: 5.0,
            scale: 0.1,
            hue: 0.02,
            saturation: 0.1,
            contrast: 0.1,
            brightness: 0.1,
            noise_std: 0.01,
        }
    }
}

fn dims(image: &Tensor) -> (usize, usize) {
    let s = image.shape();
    assert!(s.len() == 3 && s[0] == 3, "expected [3, H, W], got {s:?}");
    (s[1], s[2])
}

pub fn hflip(image: &Tensor) -> Tensor {
    let (h, w) = dims(image);
    Tensor::from_fn(image.shape(), |i| {
        let (cy, x) = (i / w, i % w);
        image.data()[cy * w + (w - 1 - x)]
    })
    .reshape(&[3, h, w])
    .expect("shape")
}

pub fn vflip(image: &Tensor) -> Tensor {
    let (h, w) = dims(image);
    Tensor::from_fn(image.shape(), |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        image.data()[(c * h + (h - 1 - y)) * w + x]
    })
}

/// Rotates counter-clockwise by `quarter_turns × 90°`.
/// One turn maps input pixel `(y, x)` to output `(W - 1 - x, y)`.
pub fn rotate90(image: &Tensor, quarter_turns: usize) -> Tensor {
    let mut out = image.clone();
    for _ in 0..quarter_turns % 4 {
        let (h, w) = dims(&out);
        let src = out;
        // output is [3, w, h]; output (oy, ox) reads input (ox, w - 1 - oy)
        out = Tensor::from_fn(&[3, w, h], |i| {
            let (c, oy, ox) = (i / (w * h), (i / h) % w, i % h);
            src.data()[(c * h + ox) * w + (w - 1 - oy)]
        });
    }
    out
}

fn sample_bilinear(plane: &[Real], h: usize, w: usize, y: Real, x: Real) -> Real {
    let y = y.clamp(0.0, (h - 1) as Real);
    let x = x.clamp(0.0, (w - 1) as Real);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as Real, x - x0 as Real);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Warps about the image centre with the forward map `p ↦ A·p + t`.
pub fn affine(image: &Tensor, a: [[Real; 2]; 2], t: (Real, Real)) -> Tensor {
    let (h, w) = dims(image);
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let (cy, cx) = ((h as Real - 1.0) / 2.0, (w as Real - 1.0) / 2.0);
    let plane = h * w;
    Tensor::from_fn(image.shape(), |i| {
        let (c, y, x) = (i / plane, (i / w) % h, i % w);
        // (x, y) order for the 2×2 map
        let px = x as Real - cx - t.0;
        let py = y as Real - cy - t.1;
        let sx = inv[0][0] * px + inv[0][1] * py + cx;
        let sy = inv[1][0] * px + inv[1][1] * py + cy;
        sample_bilinear(&image.data()[c * plane..(c + 1) * plane], h, w, sy, sx)
    })
}

pub fn rgb_to_hsv(r: Real, g: Real, b: Real) -> (Real, Real, Real) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: Real, s: Real, v: Real) -> (Real, Real, Real) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

fn map_hsv(image: &Tensor, f: impl Fn(Real, Real, Real) -> (Real, Real, Real)) -> Tensor {
    let plane = image.numel() / 3;
    let d = image.data();
    let mut out = image.clone();
    let o = out.data_mut();
    for p in 0..plane {
        let (h, s, v) = rgb_to_hsv(d[p], d[plane + p], d[2 * plane + p]);
        let (h, s, v) = f(h, s, v);
        let (r, g, b) = hsv_to_rgb(h, s.clamp(0.0, 1.0), v);
        o[p] = r;
        o[plane + p] = g;
        o[2 * plane + p] = b;
    }
    out
}

/// Applies a random subset of the policy's transforms. Consumes randomness
/// only for enabled transforms, in a fixed order.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, rng: &mut R, policy: &AugmentPolicy) -> Tensor {
    let (h, w) = dims(image);
    if policy.is_identity() {
        return image.clone();
    }
    let fire = |rng: &mut R| rng.gen::<Real>() < policy.prob;
    let mut out = image.clone();
    if policy.hflip && fire(rng) {
        out = hflip(&out);
    }
    if policy.vflip && fire(rng) {
        out = vflip(&out);
    }
    if policy.rot90 && h == w && fire(rng) {
        out = rotate90(&out, rng.gen_range(1..4));
    }

    let mut a = [[1.0, 0.0], [0.0, 1.0]];
    let mut t = (0.0, 0.0);
    let mut warped = false;
    let sym = |rng: &mut R, m: Real| rng.gen_range(-m..=m);
    if policy.rotate_deg > 0.0 && fire(rng) {
        let th = sym(rng, policy.rotate_deg).to_radians();
        let (s, c) = th.sin_cos();
        a = mat_mul([[c, -s], [s, c]], a);
        warped = true;
    }
    if policy.shear_deg > 0.0 && fire(rng) {
        let k = sym(rng, policy.shear_deg).to_radians().tan();
        a = mat_mul([[1.0, k], [0.0, 1.0]], a);
        warped = true;
    }
    if policy.scale > 0.0 && fire(rng) {
        let s = 1.0 + sym(rng, policy.scale);
        a = mat_mul([[s, 0.0], [0.0, s]], a);
        warped = true;
    }
    if policy.translate_frac > 0.0 && fire(rng) {
        t = (
            sym(rng, policy.translate_frac) * w as Real,
            sym(rng, policy.translate_frac) * h as Real,
        );
        warped = true;
    }
    if warped {
        out = affine(&out, a, t);
    }

    if policy.hue > 0.0 && fire(rng) {
        let dh = sym(rng, policy.hue);
        out = map_hsv(&out, |h, s, v| (h + dh, s, v));
    }
    if policy.saturation > 0.0 && fire(rng) {
        let f = 1.0 + sym(rng, policy.saturation);
        out = map_hsv(&out, |h, s, v| (h, s * f, v));
    }
    if policy.contrast > 0.0 && fire(rng) {
        let f = 1.0 + sym(rng, policy.contrast);
        let mean = out.sum() / out.numel() as Real;
        out = out.map(|v| (v - mean) * f + mean);
    }
    if policy.brightness > 0.0 && fire(rng) {
        let d = sym(rng, policy.brightness);
        out = out.map(|v| v + d);
    }
    if policy.noise_std > 0.0 && fire(rng) {
        let normal = Normal::new(0.0, policy.noise_std).expect("positive std");
        for v in out.data_mut() {
            *v += normal.sample(rng);
        }
    }
    out.map(|v| v.clamp(0.0, 1.0))
}

fn mat_mul(a: [[Real; 2]; 2], b: [[Real; 2]; 2]) -> [[Real; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_rng;
    use proptest::prelude::*;

    fn pattern() -> Tensor {
        // channel c, row y, col x holds c*9 + y*3 + x (scaled into [0, 1])
        Tensor::from_fn(&[3, 3, 3], |i| i as Real / 26.0)
    }

    #[test]
    fn identity_policy_is_noop() {
        let img = pattern();
        assert_eq!(augment(&img, &mut init_rng(1), &AugmentPolicy::identity()), img);
    }

    #[test]
    fn hflip_involution() {
        let img = pattern();
        assert_eq!(hflip(&hflip(&img)), img);
        assert_ne!(hflip(&img), img);
    }

    #[test]
    fn quarter_turn_hand_traced() {
        // rows of channel 0 before:   after one counter-clockwise turn:
        //   0 1 2                       2 5 8
        //   3 4 5                       1 4 7
        //   6 7 8                       0 3 6
        let r = rotate90(&pattern(), 1);
        let got: Vec<Real> = r.data()[..9].iter().map(|v| (v * 26.0).round()).collect();
        assert_eq!(got, vec![2.0, 5.0, 8.0, 1.0, 4.0, 7.0, 0.0, 3.0, 6.0]);
        assert_eq!(rotate90(&pattern(), 4), pattern());
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.4, 0.9), (1.0, 0.0, 0.0), (0.5, 0.5, 0.5), (0.1, 0.9, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn stays_in_range_and_shape(seed in any::<u64>(), h in 2usize..7, w in 2usize..7) {
            let img = Tensor::from_fn(&[3, h, w], |i| ((i * 7919) % 101) as Real / 100.0);
            let policy = AugmentPolicy { prob: 1.0, rot90: true, vflip: true, ..AugmentPolicy::default() };
            let out = augment(&img, &mut init_rng(seed), &policy);
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let again = augment(&img, &mut init_rng(seed), &policy);
            prop_assert_eq!(out, again);
        }
    }
}
