//! Grad-CAM and Guided Grad-CAM saliency for the image model.

use serde::{Deserialize, Serialize};

use crate::cohort::{DiagnosisLabel, ScanImage, N_CLASSES};
use crate::imageio::{encode_gray_png, unit_to_gray, PngError};
use crate::models::{ImageModel, ReluMode};

use super::ExplainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMode {
    GradCam,
    GuidedGradCam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub side: usize,
    /// Row-major, in [0, 1], maximum exactly 1 unless all zero.
    pub values: Vec<f64>,
    pub target_class: DiagnosisLabel,
    pub mode: SaliencyMode,
}

impl SaliencyMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.side + x]
    }

    pub fn to_png(&self) -> Result<Vec<u8>, PngError> {
        encode_gray_png(
            self.side as u32,
            self.side as u32,
            &unit_to_gray(&self.values),
        )
    }

    /// Fraction of total saliency falling inside `inside(y, x)`; zero for an
    /// all-zero map.
    pub fn mass_fraction(&self, inside: impl Fn(usize, usize) -> bool) -> f64 {
        let total: f64 = self.values.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut hit = 0.0;
        for y in 0..self.side {
            for x in 0..self.side {
                if inside(y, x) {
                    hit += self.get(y, x);
                }
            }
        }
        hit / total
    }
}

/// Bilinear resize of a square map with half-pixel centers, so pixel `d` of
/// the output samples the input at `(d + 0.5) * in / out - 0.5`.
pub fn bilinear_upsample(src: &[f64], in_side: usize, out_side: usize) -> Vec<f64> {
    let scale = in_side as f64 / out_side as f64;
    let coord = |d: usize| {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_side - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(in_side - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; out_side * out_side];
    for y in 0..out_side {
        let (y0, y1, ty) = coord(y);
        for x in 0..out_side {
            let (x0, x1, tx) = coord(x);
            let top = src[y0 * in_side + x0] * (1.0 - tx) + src[y0 * in_side + x1] * tx;
            let bottom = src[y1 * in_side + x0] * (1.0 - tx) + src[y1 * in_side + x1] * tx;
            out[y * out_side + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

fn normalize_by_max(v: &mut [f64]) {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for x in v.iter_mut() {
            *x /= max;
        }
    }
}

pub fn grad_cam(
    model: &ImageModel,
    image: &ScanImage,
    target: DiagnosisLabel,
    mode: SaliencyMode,
) -> Result<SaliencyMap, ExplainError> {
    let shape = model.shape();
    let cache = model.forward(image.pixels())?;
    let mut one_hot = [0.0; N_CLASSES];
    one_hot[target.code()] = 1.0;
    let (d_a2, _) = model.backward(&cache, &one_hot, ReluMode::Standard, false, None);

    let side = shape.conv_side();
    let area = side * side;
    let maps = cache.last_conv();
    let mut cam = vec![0.0; area];
    for k in 0..shape.conv2 {
        let grads = &d_a2[k * area..(k + 1) * area];
        let alpha = grads.iter().sum::<f64>() / area as f64;
        for (c, a) in cam.iter_mut().zip(&maps[k * area..(k + 1) * area]) {
            *c += alpha * a;
        }
    }
    for c in &mut cam {
        *c = c.max(0.0);
    }
    let mut values = bilinear_upsample(&cam, side, shape.side);
    if mode == SaliencyMode::GuidedGradCam {
        let (_, d_input) = model.backward(&cache, &one_hot, ReluMode::Guided, true, None);
        let guided = d_input.expect("input gradient was requested");
        for (v, g) in values.iter_mut().zip(&guided) {
            *v *= g.abs();
        }
    }
    normalize_by_max(&mut values);
    Ok(SaliencyMap {
        side: shape.side,
        values,
        target_class: target,
        mode,
    })
}
