//! Direct loop references for the optimized kernels, used by the self-test.

use crate::tensor::{Real, Tensor};

/// `[m, k] × [k, n]` by the triple loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum()
    })
}

/// Grouped, dilated, strided, zero-padded cross-correlation of
/// `[B, C, H, W]` with `[O, C/groups, k, k]`. Also returns the number of
/// multiply-accumulates executed (padding taps included).
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    dilation: usize,
    padding: usize,
    groups: usize,
) -> (Tensor, usize) {
    let [b, h, wd] = [x.shape()[0], x.shape()[2], x.shape()[3]];
    let [o, cg, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let k_eff = k + (k - 1) * (dilation - 1);
    let oh = (h + 2 * padding - k_eff) / stride + 1;
    let ow = (wd + 2 * padding - k_eff) / stride + 1;
    let og = o / groups;
    let mut out = Tensor::zeros(&[b, o, oh, ow]);
    let mut macs = 0;
    for n in 0..b {
        for oc in 0..o {
            let g = oc / og;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv.data()[oc]);
                    for ic in 0..cg {
                        for ky in 0..k {
                            for kx in 0..k {
                                macs += 1;
                                let iy = (y * stride + ky * dilation) as isize - padding as isize;
                                let ix = (xo * stride + kx * dilation) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = x.at(&[n, g * cg + ic, iy as usize, ix as usize]);
                                acc += xi * w.at(&[oc, ic, ky, kx]);
                            }
                        }
                    }
                    out.set(&[n, oc, y, xo], acc);
                }
            }
        }
    }
    (out, macs)
}

/// Spatial attention on `[d, S]` matrices: output column `j` is
/// `Σ_i softmax_i(q_j·k_i/√d) v_i`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (d, s) = (q.shape()[0], q.shape()[1]);
    let scale = 1.0 / (d as Real).sqrt();
    let mut out = Tensor::zeros(&[d, s]);
    for j in 0..s {
        let logits: Vec<Real> = (0..s)
            .map(|i| (0..d).map(|c| q.at(&[c, j]) * k.at(&[c, i])).sum::<Real>() * scale)
            .collect();
        let m = logits.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let e: Vec<Real> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: Real = e.iter().sum();
        for c in 0..d {
            let v_sum: Real = (0..s).map(|i| e[i] / z * v.at(&[c, i])).sum();
            out.set(&[c, j], v_sum);
        }
    }
    out
}

/// Depthwise `k×k` (same padding) followed by pointwise 1×1, both with bias.
pub fn dsconv(x: &Tensor, dw: &Tensor, dw_b: &Tensor, pw: &Tensor, pw_b: &Tensor) -> Tensor {
    let c = x.shape()[1];
    let k = dw.shape()[2];
    let (mid, _) = conv2d(x, dw, Some(dw_b), 1, 1, (k - 1) / 2, c);
    conv2d(&mid, pw, Some(pw_b), 1, 1, 0, 1).0
}
