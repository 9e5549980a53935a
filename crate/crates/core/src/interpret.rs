//! Grad-CAM heatmaps and their image outputs.

use crate::data::{ppm, resize};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Real, Tensor};

/// Alpha of the heatmap when blended onto the input image.
pub const OVERLAY_ALPHA: Real = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCamResult {
    /// `[H, W]`, min-max normalized to [0, 1].
    pub heatmap: Tensor,
    pub target: usize,
    pub layer: String,
}

/// `ReLU(Σ_c w_c · F_c)` with `w_c` the spatial mean of `∂y/∂F_c`.
/// Both inputs are `[C, h, w]`; the result is `[h, w]`.
pub fn cam_from_maps(features: &Tensor, grads: &Tensor) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 || grads.shape() != s {
        return Err(Error::shape("cam_from_maps", s, grads.shape()));
    }
    let (c, plane) = (s[0], s[1] * s[2]);
    let mut cam = vec![0.0; plane];
    for ch in 0..c {
        let g = &grads.data()[ch * plane..(ch + 1) * plane];
        let weight = g.iter().sum::<Real>() / plane as Real;
        let f = &features.data()[ch * plane..(ch + 1) * plane];
        cam.iter_mut().zip(f).for_each(|(a, v)| *a += weight * v);
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    Tensor::new(vec![s[1], s[2]], cam)
}

/// Min-max scaling to [0, 1]. A constant map becomes all zeros when it is
/// zero and all ones otherwise.
pub fn normalize_heatmap(map: &Tensor) -> Tensor {
    let lo = map.data().iter().copied().fold(Real::INFINITY, Real::min);
    let hi = map.data().iter().copied().fold(Real::NEG_INFINITY, Real::max);
    if hi - lo <= Real::EPSILON * hi.abs().max(1.0) {
        return map.map(|_| if hi > 0.0 { 1.0 } else { 0.0 });
    }
    map.map(|v| (v - lo) / (hi - lo))
}

/// Heatmap of `target_class` for one normalized `[3, H, W]` image, tapped
/// at the output of `layer` (see [`Model::layer_names`]).
pub fn grad_cam(
    model: &Model,
    store: &ParamStore,
    image: &Tensor,
    target_class: usize,
    layer: &str,
) -> Result<GradCamResult> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("grad_cam", s, &[3, 0, 0]));
    }
    if target_class >= model.cfg.num_classes {
        return Err(Error::Contract(format!(
            "target class {target_class} out of range for {} classes",
            model.cfg.num_classes
        )));
    }
    let (h, w) = (s[1], s[2]);
    let mut ctx = Ctx::new(store, false, true);
    let x = ctx.input(image.clone().reshape(&[1, 3, h, w])?);
    let out = model.forward(&mut ctx, x)?;
    let feature = out.feature(layer)?;
    let logit = ctx.tape.slice(out.logits, 1, target_class, 1)?;
    let y = ctx.tape.sum(logit);
    ctx.tape.backward(y)?;
    let fs = ctx.tape.shape(feature).to_vec();
    let maps = ctx.tape.value(feature).clone().reshape(&fs[1..])?;
    let grads = ctx
        .tape
        .grad(feature)
        .unwrap_or_else(|| Tensor::zeros(&fs))
        .reshape(&fs[1..])?;
    let cam = cam_from_maps(&maps, &grads)?;
    let cam = resize(&cam.reshape(&[1, fs[2], fs[3]])?, (h, w)).reshape(&[h, w])?;
    Ok(GradCamResult {
        heatmap: normalize_heatmap(&cam),
        target: target_class,
        layer: layer.to_string(),
    })
}

/// Blue-cyan-yellow-red ramp for a value in [0, 1].
pub fn colormap(v: Real) -> [Real; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// P5 grayscale rendering of a `[H, W]` heatmap.
pub fn heatmap_pgm(heatmap: &Tensor) -> Vec<u8> {
    ppm::encode_pgm(heatmap)
}

/// P6 rendering of the colour-mapped heatmap blended onto an input image
/// (`[3, H, W]`, values in [0, 1]).
pub fn overlay_ppm(image: &Tensor, heatmap: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || heatmap.shape() != &s[1..] {
        return Err(Error::shape("overlay_ppm", s, heatmap.shape()));
    }
    let plane = s[1] * s[2];
    let mut out = image.clone();
    for (p, &v) in heatmap.data().iter().enumerate() {
        let rgb = colormap(v);
        for ch in 0..3 {
            let px = &mut out.data_mut()[ch * plane + p];
            *px = ((1.0 - OVERLAY_ALPHA) * *px + OVERLAY_ALPHA * rgb[ch]).clamp(0.0, 1.0);
        }
    }
    Ok(ppm::encode_ppm(&out))
}
