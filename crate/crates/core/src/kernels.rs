// Raw loops behind the tape's heavier primitives. Everything here works on
// flat row-major slices; shape checking happens in the callers.

use crate::tensor::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: Real = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a 2-D cross-correlation over `[B, C_in, H, W]` input with
/// `[C_out, C_in / groups, k, k]` weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Output positions `o` in `[lo, hi)` whose input tap `o*stride + offset`
    /// lands inside `[0, extent)`.
    fn valid_range(&self, offset: isize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
        let last = extent as isize - 1 - offset;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last / s + 1).min(out as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }

    /// Visits every (input index, weight index, output index) triple whose
    /// product contributes to the output.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (cin_g, cout_g) = (self.cin_per_group(), self.cout_per_group());
        let k = self.kernel;
        let in_plane = self.in_h * self.in_w;
        let out_plane = self.out_h * self.out_w;
        for b in 0..self.batch {
            for oc in 0..self.out_channels {
                let g = oc / cout_g;
                let out_base = (b * self.out_channels + oc) * out_plane;
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    let in_base = (b * self.in_channels + ic) * in_plane;
                    let w_base = (oc * cin_g + icg) * k * k;
                    for ky in 0..k {
                        let off_y = (ky * self.dilation) as isize - self.padding as isize;
                        let (y_lo, y_hi) = self.valid_range(off_y, self.in_h, self.out_h);
                        for kx in 0..k {
                            let off_x = (kx * self.dilation) as isize - self.padding as isize;
                            let (x_lo, x_hi) = self.valid_range(off_x, self.in_w, self.out_w);
                            if x_lo >= x_hi {
                                continue;
                            }
                            let w_idx = w_base + ky * k + kx;
                            for oy in y_lo..y_hi {
                                let iy = (oy * self.stride) as isize + off_y;
                                let in_row = in_base + iy as usize * self.in_w;
                                let ix0 = (x_lo * self.stride) as isize + off_x;
                                f(
                                    in_row + ix0 as usize,
                                    w_idx,
                                    out_base + oy * self.out_w + x_lo,
                                    x_hi - x_lo,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn forward(&self, x: &[Real], w: &[Real], bias: Option<&[Real]>) -> Vec<Real> {
        let out_plane = self.out_h * self.out_w;
        let mut out = vec![0.0; self.batch * self.out_channels * out_plane];
        if let Some(bias) = bias {
            for (plane_idx, plane) in out.chunks_mut(out_plane).enumerate() {
                plane.fill(bias[plane_idx % self.out_channels]);
            }
        }
        let s = self.stride;
        self.for_each_tap(|xi, wi, oi, run| {
            let wv = w[wi];
            if s == 1 {
                for (o, &xv) in out[oi..oi + run].iter_mut().zip(&x[xi..xi + run]) {
                    *o += wv * xv;
                }
            } else {
                for t in 0..run {
                    out[oi + t] += wv * x[xi + t * s];
                }
            }
        });
        out
    }

    /// Returns (d_input, d_weight, d_bias).
    pub(crate) fn backward(
        &self,
        x: &[Real],
        w: &[Real],
        dy: &[Real],
    ) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let s = self.stride;
        self.for_each_tap(|xi, wi, oi, run| {
            let wv = w[wi];
            let mut acc = 0.0;
            for t in 0..run {
                let g = dy[oi + t];
                dx[xi + t * s] += wv * g;
                acc += x[xi + t * s] * g;
            }
            dw[wi] += acc;
        });
        let out_plane = self.out_h * self.out_w;
        let mut db = vec![0.0; self.out_channels];
        for (plane_idx, plane) in dy.chunks(out_plane).enumerate() {
            db[plane_idx % self.out_channels] += plane.iter().sum::<Real>();
        }
        (dx, dw, db)
    }
}

/// Source taps for one axis of align-corners-false bilinear resampling:
/// output `i` reads `w0 * src[i0] + w1 * src[i1]`.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, Real, Real)> {
    let scale = src as Real / dst as Real;
    (0..dst)
        .map(|i| {
            let pos = ((i as Real + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = pos - i0 as Real;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) struct Bilinear {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    ys: Vec<(usize, usize, Real, Real)>,
    xs: Vec<(usize, usize, Real, Real)>,
}

impl Bilinear {
    pub(crate) fn new(planes: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Bilinear {
            planes,
            in_h,
            in_w,
            out_h,
            out_w,
            ys: bilinear_taps(in_h, out_h),
            xs: bilinear_taps(in_w, out_w),
        }
    }

    pub(crate) fn forward(&self, x: &[Real]) -> Vec<Real> {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut out = vec![0.0; self.planes * op];
        for p in 0..self.planes {
            let src = &x[p * ip..(p + 1) * ip];
            let dst = &mut out[p * op..(p + 1) * op];
            for (oy, &(y0, y1, wy0, wy1)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in self.xs.iter().enumerate() {
                    let top = wx0 * src[y0 * self.in_w + x0] + wx1 * src[y0 * self.in_w + x1];
                    let bot = wx0 * src[y1 * self.in_w + x0] + wx1 * src[y1 * self.in_w + x1];
                    dst[oy * self.out_w + ox] = wy0 * top + wy1 * bot;
                }
            }
        }
        out
    }

    pub(crate) fn backward(&self, dy: &[Real]) -> Vec<Real> {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut dx = vec![0.0; self.planes * ip];
        for p in 0..self.planes {
            let g = &dy[p * op..(p + 1) * op];
            let d = &mut dx[p * ip..(p + 1) * ip];
            for (oy, &(y0, y1, wy0, wy1)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in self.xs.iter().enumerate() {
                    let v = g[oy * self.out_w + ox];
                    d[y0 * self.in_w + x0] += wy0 * wx0 * v;
                    d[y0 * self.in_w + x1] += wy0 * wx1 * v;
                    d[y1 * self.in_w + x0] += wy1 * wx0 * v;
                    d[y1 * self.in_w + x1] += wy1 * wx1 * v;
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_enumeration() {
        for stride in 1..4 {
            for offset in -5isize..6 {
                for extent in 1..9 {
                    let out = 8;
                    let g = ConvGeom {
                        batch: 1,
                        in_channels: 1,
                        out_channels: 1,
                        groups: 1,
                        in_h: extent,
                        in_w: extent,
                        kernel: 1,
                        stride,
                        dilation: 1,
                        padding: 0,
                        out_h: out,
                        out_w: out,
                    };
                    let (lo, hi) = g.valid_range(offset, extent, out);
                    let expected: Vec<usize> = (0..out)
                        .filter(|&o| {
                            let i = (o * stride) as isize + offset;
                            i >= 0 && i < extent as isize
                        })
                        .collect();
                    let got: Vec<usize> = (lo..hi).collect();
                    assert_eq!(got, expected, "stride {stride} offset {offset} extent {extent}");
                }
            }
        }
    }
}
