//! Brute-force references shared by the integration tests. Plain nested
//! loops over flat buffers; nothing here calls the library kernels.
#![allow(dead_code)]

use caga::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn matmul(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub struct ConvCase {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvCase {
    pub fn k_eff(&self) -> usize {
        (self.k - 1) * self.dilation + 1
    }

    pub fn out_extent(&self, e: usize) -> usize {
        (e + 2 * self.padding - self.k_eff()) / self.stride + 1
    }
}

/// Direct convolution; also returns the number of inner-loop iterations.
pub fn conv(c: &ConvCase, x: &[Real], w: &[Real], b: Option<&[Real]>) -> (Vec<Real>, usize) {
    let (oh, ow) = (c.out_extent(c.h), c.out_extent(c.w));
    let cg = c.cin / c.groups;
    let og = c.cout / c.groups;
    let mut y = vec![0.0; c.batch * c.cout * oh * ow];
    let mut iters = 0usize;
    for n in 0..c.batch {
        for o in 0..c.cout {
            let g = o / og;
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = b.map_or(0.0, |b| b[o]);
                    for ci in 0..cg {
                        let ch = g * cg + ci;
                        for u in 0..c.k {
                            for v in 0..c.k {
                                iters += 1;
                                let r = (i * c.stride + u * c.dilation) as i64 - c.padding as i64;
                                let q = (j * c.stride + v * c.dilation) as i64 - c.padding as i64;
                                if r >= 0 && q >= 0 && (r as usize) < c.h && (q as usize) < c.w {
                                    let xv = x[((n * c.cin + ch) * c.h + r as usize) * c.w + q as usize];
                                    let wv = w[((o * cg + ci) * c.k + u) * c.k + v];
                                    s += xv * wv;
                                }
                            }
                        }
                    }
                    y[((n * c.cout + o) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    (y, iters)
}

/// Spatial attention on `[d, S]` buffers; output column `j` mixes the value
/// columns with the softmax of query `j` against every key. Also returns
/// the row-stochastic weights `[S, S]`.
pub fn attention(q: &[Real], k: &[Real], v: &[Real], d: usize, s: usize) -> (Vec<Real>, Vec<Real>) {
    let mut a = vec![0.0; s * s];
    for j in 0..s {
        let mut row = vec![0.0; s];
        for i in 0..s {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q[c * s + j] * k[c * s + i];
            }
            row[i] = dot / (d as Real).sqrt();
        }
        let m = row.iter().cloned().fold(Real::MIN, Real::max);
        let z: Real = row.iter().map(|r| (r - m).exp()).sum();
        for i in 0..s {
            a[j * s + i] = (row[i] - m).exp() / z;
        }
    }
    let mut out = vec![0.0; d * s];
    for c in 0..d {
        for j in 0..s {
            out[c * s + j] = (0..s).map(|i| a[j * s + i] * v[c * s + i]).sum();
        }
    }
    (out, a)
}

pub fn max_abs_diff(a: &[Real], b: &[Real]) -> Real {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, Real::max)
}

/// Half-pixel bilinear resize of `planes` planes `[h, w]` to `[oh, ow]`;
/// source coordinates below zero snap to the first row or column.
pub fn bilinear(x: &[Real], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<Real> {
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, Real) {
        let mut src = (o as Real + 0.5) * inp as Real / out as Real - 0.5;
        if src < 0.0 {
            src = 0.0;
        }
        let lo = (src.floor() as usize).min(inp - 1);
        let hi = if lo + 1 < inp { lo + 1 } else { inp - 1 };
        (lo, hi, src - lo as Real)
    };
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..oh {
            let (r0, r1, fy) = coord(i, oh, h);
            for j in 0..ow {
                let (c0, c1, fx) = coord(j, ow, w);
                let at = |r: usize, c: usize| x[(p * h + r) * w + c];
                let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
                let bot = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
                y[(p * oh + i) * ow + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    y
}
