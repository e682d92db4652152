//! Small scan classifier:
//! conv 3x3 -> ReLU -> maxpool 2 -> conv 3x3 -> ReLU -> maxpool 2 -> dense -> ReLU -> softmax head.
//!
//! Convolutions use zero "same" padding, so a 64x64 scan gives 32x32 maps
//! after the first pool and 16x16 after the second. Tensors are flat
//! `[channel][row][col]` vectors; gradients are derived by hand.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::optim::{EarlyStop, Momentum};
use super::{
    holdout_split, labels_of, log_priors, missing, softmax, ClassDistribution, ModelError,
};
use crate::artifact::{ArtifactError, Container, SectionWriter};
use crate::cohort::{DiagnosisLabel, Modality, PatientRecord, ScanImage, IMAGE_SIDE, N_CLASSES};

const KIND: &str = "image-cnn";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvNetShape {
    /// Input height and width; must be a multiple of 4.
    pub side: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

impl Default for ConvNetShape {
    fn default() -> Self {
        Self {
            side: IMAGE_SIDE,
            conv1: 8,
            conv2: 16,
            hidden: 64,
        }
    }
}

impl ConvNetShape {
    fn validate(&self) -> Result<(), ModelError> {
        if self.side == 0
            || self.side % 4 != 0
            || self.conv1 == 0
            || self.conv2 == 0
            || self.hidden == 0
        {
            return Err(ModelError::InvalidHyperparams(format!("{self:?}")));
        }
        Ok(())
    }

    /// Side of the last convolution's output maps.
    pub fn conv_side(&self) -> usize {
        self.side / 2
    }

    fn flat_len(&self) -> usize {
        self.conv2 * (self.side / 4) * (self.side / 4)
    }

    fn tensor_lens(&self) -> [usize; 8] {
        [
            self.conv1 * 9,
            self.conv1,
            self.conv2 * self.conv1 * 9,
            self.conv2,
            self.hidden * self.flat_len(),
            self.hidden,
            N_CLASSES * self.hidden,
            N_CLASSES,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageParams {
    pub shape: ConvNetShape,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Share of the training records held out for early stopping; 0 trains
    /// for `max_epochs` without a holdout.
    pub holdout_fraction: f64,
    /// L2 penalty on the weight tensors (biases are not decayed).
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ImageParams {
    fn default() -> Self {
        Self {
            shape: ConvNetShape::default(),
            // 0.05 with momentum 0.9 stalls at chance on 64x64 scans
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            holdout_fraction: 0.15,
            // pulls dense weights at uninformative positions toward zero,
            // which keeps Grad-CAM off the spine column
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

impl ImageParams {
    fn validate(&self) -> Result<(), ModelError> {
        self.shape.validate()?;
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && (0.0..0.5).contains(&self.holdout_fraction)
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidHyperparams(format!("{self:?}")))
        }
    }
}

/// How ReLU layers pass gradients backwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluMode {
    Standard,
    /// Only positive gradients through positively activated units.
    Guided,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    shape: ConvNetShape,
    input: Vec<f64>,
    z1: Vec<f64>,
    p1: Vec<f64>,
    p1_arg: Vec<usize>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    p2: Vec<f64>,
    p2_arg: Vec<usize>,
    z3: Vec<f64>,
    a3: Vec<f64>,
    logits: [f64; N_CLASSES],
}

impl ForwardCache {
    /// Last convolution's post-ReLU maps, `conv2 x conv_side x conv_side`.
    pub fn last_conv(&self) -> &[f64] {
        &self.a2
    }

    /// Post-ReLU activations of the dense layer.
    pub fn penultimate(&self) -> &[f64] {
        &self.a3
    }

    pub fn logits(&self) -> [f64; N_CLASSES] {
        self.logits
    }

    pub fn shape(&self) -> ConvNetShape {
        self.shape
    }
}

/// Gradients in the order of [`ImageModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGradients(pub [Vec<f64>; 8]);

impl ImageGradients {
    fn zeros(shape: &ConvNetShape) -> Self {
        Self(shape.tensor_lens().map(|n| vec![0.0; n]))
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        std::array::from_fn(|i| self.0[i].as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageModel {
    shape: ConvNetShape,
    /// conv1 weights, conv1 bias, conv2 weights, conv2 bias, dense weights,
    /// dense bias, head weights, head bias.
    params: [Vec<f64>; 8],
}

fn conv3x3_forward(
    input: &[f64],
    c_in: usize,
    side: usize,
    w: &[f64],
    b: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let plane = side * side;
    let mut out = vec![0.0; c_out * plane];
    for o in 0..c_out {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(b[o]);
        for c in 0..c_in {
            let in_plane = &input[c * plane..(c + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[((o * c_in + c) * 3 + ky) * 3 + kx];
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (side as isize - dx).min(side as isize) as usize;
                    for y in 0..side {
                        let iy = y as isize + dy;
                        if iy < 0 || iy >= side as isize {
                            continue;
                        }
                        let ix0 = (x0 as isize + dx) as usize;
                        let src = &in_plane
                            [iy as usize * side + ix0..iy as usize * side + ix0 + (x1 - x0)];
                        let dst = &mut out_plane[y * side + x0..y * side + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients, and the input gradient if asked.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    d_out: &[f64],
    c_in: usize,
    side: usize,
    w: &[f64],
    c_out: usize,
    grads: Option<(&mut [f64], &mut [f64])>,
    mut d_in: Option<&mut [f64]>,
) {
    let plane = side * side;
    let mut grads = grads;
    for o in 0..c_out {
        let g_plane = &d_out[o * plane..(o + 1) * plane];
        if let Some((_, db)) = grads.as_mut() {
            db[o] += g_plane.iter().sum::<f64>();
        }
        for c in 0..c_in {
            let in_plane = &input[c * plane..(c + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wi = ((o * c_in + c) * 3 + ky) * 3 + kx;
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (side as isize - dx).min(side as isize) as usize;
                    let mut acc = 0.0;
                    for y in 0..side {
                        let iy = y as isize + dy;
                        if iy < 0 || iy >= side as isize {
                            continue;
                        }
                        let ix0 = (x0 as isize + dx) as usize;
                        let base = iy as usize * side + ix0;
                        let g_row = &g_plane[y * side + x0..y * side + x1];
                        if grads.is_some() {
                            let src = &in_plane[base..base + (x1 - x0)];
                            acc += g_row.iter().zip(src).map(|(g, s)| g * s).sum::<f64>();
                        }
                        if let Some(d_in) = d_in.as_deref_mut() {
                            let wv = w[wi];
                            let dst = &mut d_in[c * plane + base..c * plane + base + (x1 - x0)];
                            for (d, g) in dst.iter_mut().zip(g_row) {
                                *d += wv * g;
                            }
                        }
                    }
                    if let Some((dw, _)) = grads.as_mut() {
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
}

/// 2x2 max-pool; ties keep the first maximum in row-major window order.
fn maxpool2(a: &[f64], channels: usize, side: usize) -> (Vec<f64>, Vec<usize>) {
    let half = side / 2;
    let mut out = Vec::with_capacity(channels * half * half);
    let mut arg = Vec::with_capacity(channels * half * half);
    for c in 0..channels {
        for i in 0..half {
            for j in 0..half {
                let mut best = c * side * side + 2 * i * side + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let k = c * side * side + (2 * i + di) * side + 2 * j + dj;
                    if a[k] > a[best] {
                        best = k;
                    }
                }
                out.push(a[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn unpool(d_out: &[f64], arg: &[usize], len: usize) -> Vec<f64> {
    let mut d = vec![0.0; len];
    for (g, &k) in d_out.iter().zip(arg) {
        d[k] += g;
    }
    d
}

fn relu_backward(z: &[f64], d_a: &mut [f64], mode: ReluMode) {
    for (d, &zi) in d_a.iter_mut().zip(z) {
        let pass = zi > 0.0 && (mode == ReluMode::Standard || *d > 0.0);
        if !pass {
            *d = 0.0;
        }
    }
}

fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| v.max(0.0)).collect()
}

impl ImageModel {
    /// He-initialized network; the head bias starts at `head_bias`.
    pub fn initialize(
        shape: ConvNetShape,
        head_bias: [f64; N_CLASSES],
        seed: u64,
    ) -> Result<Self, ModelError> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |n: usize, fan_in: usize| -> Vec<f64> {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let lens = shape.tensor_lens();
        let w1 = he(lens[0], 9);
        let w2 = he(lens[2], shape.conv1 * 9);
        let w3 = he(lens[4], shape.flat_len());
        let w4: Vec<f64> = he(lens[6], shape.hidden)
            .iter()
            .map(|v| v * std::f64::consts::FRAC_1_SQRT_2)
            .collect();
        Ok(Self {
            shape,
            params: [
                w1,
                vec![0.0; lens[1]],
                w2,
                vec![0.0; lens[3]],
                w3,
                vec![0.0; lens[5]],
                w4,
                head_bias.to_vec(),
            ],
        })
    }

    pub fn shape(&self) -> ConvNetShape {
        self.shape
    }

    pub fn parameters(&self) -> [&[f64]; 8] {
        std::array::from_fn(|i| self.params[i].as_slice())
    }

    pub fn parameters_mut(&mut self) -> [&mut [f64]; 8] {
        let [a, b, c, d, e, f, g, h] = &mut self.params;
        [a, b, c, d, e, f, g, h]
    }

    pub fn forward(&self, pixels: &[f64]) -> Result<ForwardCache, ModelError> {
        let s = self.shape;
        if pixels.len() != s.side * s.side {
            return Err(ModelError::ShapeMismatch(format!(
                "model expects {}x{} input, got {} pixels",
                s.side,
                s.side,
                pixels.len()
            )));
        }
        let [w1, b1, w2, b2, w3, b3, w4, b4] = &self.params;
        let z1 = conv3x3_forward(pixels, 1, s.side, w1, b1, s.conv1);
        let a1 = relu(&z1);
        let (p1, p1_arg) = maxpool2(&a1, s.conv1, s.side);
        let half = s.side / 2;
        let z2 = conv3x3_forward(&p1, s.conv1, half, w2, b2, s.conv2);
        let a2 = relu(&z2);
        let (p2, p2_arg) = maxpool2(&a2, s.conv2, half);
        let flat = s.flat_len();
        let z3: Vec<f64> = (0..s.hidden)
            .map(|h| {
                b3[h]
                    + w3[h * flat..(h + 1) * flat]
                        .iter()
                        .zip(&p2)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
            })
            .collect();
        let a3 = relu(&z3);
        let logits = std::array::from_fn(|c| {
            b4[c]
                + w4[c * s.hidden..(c + 1) * s.hidden]
                    .iter()
                    .zip(&a3)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
        });
        Ok(ForwardCache {
            shape: s,
            input: pixels.to_vec(),
            z1,
            p1,
            p1_arg,
            z2,
            a2,
            p2,
            p2_arg,
            z3,
            a3,
            logits,
        })
    }

    /// Backpropagates `d_logits` through a cached pass. Returns the gradient
    /// with respect to the last convolution's post-ReLU maps and, when
    /// `want_input` is set, with respect to the input pixels. Parameter
    /// gradients are accumulated into `grads` when given.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &[f64; N_CLASSES],
        mode: ReluMode,
        want_input: bool,
        mut grads: Option<&mut ImageGradients>,
    ) -> (Vec<f64>, Option<Vec<f64>>) {
        let s = self.shape;
        let [w1, _, w2, _, w3, _, w4, _] = &self.params;
        let flat = s.flat_len();
        let half = s.side / 2;

        let mut d_a3 = vec![0.0; s.hidden];
        for c in 0..N_CLASSES {
            let row = &w4[c * s.hidden..(c + 1) * s.hidden];
            for (d, w) in d_a3.iter_mut().zip(row) {
                *d += d_logits[c] * w;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            for c in 0..N_CLASSES {
                for (gw, a) in g.0[6][c * s.hidden..(c + 1) * s.hidden]
                    .iter_mut()
                    .zip(&cache.a3)
                {
                    *gw += d_logits[c] * a;
                }
                g.0[7][c] += d_logits[c];
            }
        }
        relu_backward(&cache.z3, &mut d_a3, mode);
        let d_z3 = d_a3;

        let mut d_p2 = vec![0.0; flat];
        for (h, &dz) in d_z3.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            for (d, w) in d_p2.iter_mut().zip(&w3[h * flat..(h + 1) * flat]) {
                *d += dz * w;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            for (h, &dz) in d_z3.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                for (gw, x) in g.0[4][h * flat..(h + 1) * flat].iter_mut().zip(&cache.p2) {
                    *gw += dz * x;
                }
                g.0[5][h] += dz;
            }
        }

        let d_a2 = unpool(&d_p2, &cache.p2_arg, cache.a2.len());
        let need_lower = want_input || grads.is_some();
        if !need_lower {
            return (d_a2, None);
        }
        let mut d_z2 = d_a2.clone();
        relu_backward(&cache.z2, &mut d_z2, mode);
        let mut d_p1 = vec![0.0; cache.p1.len()];
        {
            let conv2_grads = grads.as_deref_mut().map(|g| {
                let (lo, hi) = g.0.split_at_mut(3);
                (lo[2].as_mut_slice(), hi[0].as_mut_slice())
            });
            conv3x3_backward(
                &cache.p1,
                &d_z2,
                s.conv1,
                half,
                w2,
                s.conv2,
                conv2_grads,
                Some(&mut d_p1),
            );
        }
        let mut d_z1 = unpool(&d_p1, &cache.p1_arg, cache.z1.len());
        relu_backward(&cache.z1, &mut d_z1, mode);
        let mut d_input = want_input.then(|| vec![0.0; cache.input.len()]);
        let conv1_grads = grads.map(|g| {
            let (lo, hi) = g.0.split_at_mut(1);
            (lo[0].as_mut_slice(), hi[0].as_mut_slice())
        });
        conv3x3_backward(
            &cache.input,
            &d_z1,
            1,
            s.side,
            w1,
            s.conv1,
            conv1_grads,
            d_input.as_deref_mut(),
        );
        (d_a2, d_input)
    }

    /// Mean cross-entropy over `(pixels, label)` pairs and its gradient.
    pub fn loss_and_grad(
        &self,
        batch: &[(&[f64], DiagnosisLabel)],
    ) -> Result<(f64, ImageGradients), ModelError> {
        let mut g = ImageGradients::zeros(&self.shape);
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for (pixels, label) in batch {
            let cache = self.forward(pixels)?;
            let p = softmax(&cache.logits);
            loss -= p[label.code()].ln();
            let d: [f64; N_CLASSES] =
                std::array::from_fn(|c| (p[c] - f64::from(u8::from(c == label.code()))) * scale);
            self.backward(&cache, &d, ReluMode::Standard, false, Some(&mut g));
        }
        Ok((loss * scale, g))
    }

    pub fn predict_pixels(&self, pixels: &[f64]) -> Result<ClassDistribution, ModelError> {
        Ok(ClassDistribution::from_logits(
            &self.forward(pixels)?.logits,
        ))
    }

    pub fn predict_proba(&self, image: &ScanImage) -> Result<ClassDistribution, ModelError> {
        self.predict_pixels(image.pixels())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(KIND);
        let s = self.shape;
        let mut w = SectionWriter::new();
        w.usize(s.side)
            .usize(s.conv1)
            .usize(s.conv2)
            .usize(s.hidden);
        c.push("shape", w);
        let mut w = SectionWriter::new();
        for t in &self.params {
            w.f64s(t);
        }
        c.push("weights", w);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, ArtifactError> {
        c.expect_kind(KIND)?;
        let mut r = c.section("shape")?;
        let shape = ConvNetShape {
            side: r.usize()?,
            conv1: r.usize()?,
            conv2: r.usize()?,
            hidden: r.usize()?,
        };
        shape
            .validate()
            .map_err(|e| ArtifactError::Invalid(e.to_string()))?;
        let mut r = c.section("weights")?;
        let lens = shape.tensor_lens();
        let mut params: [Vec<f64>; 8] = Default::default();
        for (p, n) in params.iter_mut().zip(lens) {
            *p = r.f64s_exact(n)?;
        }
        Ok(Self { shape, params })
    }
}

fn scan_pixels<'a>(r: &'a PatientRecord) -> Result<&'a [f64], ModelError> {
    r.image
        .as_ref()
        .map(ScanImage::pixels)
        .ok_or_else(|| missing(r, Modality::Image))
}

/// Mini-batch SGD with momentum; early stops on a stratified holdout and
/// restores the best holdout epoch's weights.
pub fn train_image_model(
    train: &[&PatientRecord],
    params: &ImageParams,
) -> Result<ImageModel, ModelError> {
    params.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    log_priors(&labels_of(train)?)?;
    let (fit, hold) = if params.holdout_fraction > 0.0 {
        holdout_split(train, params.holdout_fraction, params.seed)?
    } else {
        (train.to_vec(), Vec::new())
    };
    let fit_labels = labels_of(&fit)?;
    let fit_px = fit
        .iter()
        .map(|r| scan_pixels(r))
        .collect::<Result<Vec<_>, _>>()?;
    let hold_labels = labels_of(&hold)?;
    let hold_set: Vec<(&[f64], DiagnosisLabel)> = hold
        .iter()
        .zip(&hold_labels)
        .map(|(r, &l)| scan_pixels(r).map(|p| (p, l)))
        .collect::<Result<_, _>>()?;

    let mut model = ImageModel::initialize(params.shape, log_priors(&fit_labels)?, params.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5eed);
    let mut opt = Momentum::new(
        params.learning_rate,
        params.momentum,
        &params.shape.tensor_lens(),
    );
    let mut stop = EarlyStop::new(params.patience);
    let mut best = model.clone();
    let mut last_finite = None;
    let mut order: Vec<usize> = (0..fit.len()).collect();
    for epoch in 0..params.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(params.batch_size) {
            let items: Vec<(&[f64], DiagnosisLabel)> =
                batch.iter().map(|&i| (fit_px[i], fit_labels[i])).collect();
            let (loss, mut g) = model.loss_and_grad(&items)?;
            epoch_loss += loss * batch.len() as f64;
            if !loss.is_finite() {
                break;
            }
            if params.weight_decay > 0.0 {
                let weights = model.parameters();
                for t in [0, 2, 4, 6] {
                    for (gv, w) in g.0[t].iter_mut().zip(weights[t]) {
                        *gv += params.weight_decay * w;
                    }
                }
            }
            opt.step(&mut model.parameters_mut(), &g.tensors());
        }
        let finite = epoch_loss.is_finite()
            && model
                .parameters()
                .iter()
                .all(|t| t.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(ModelError::Diverged {
                epoch,
                last_finite_epoch: last_finite,
            });
        }
        last_finite = Some(epoch);
        if !hold_set.is_empty() {
            let (val_loss, _) = model.loss_and_grad(&hold_set)?;
            if !val_loss.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    last_finite_epoch: last_finite,
                });
            }
            let (improved, should_stop) = stop.observe(epoch, val_loss);
            if improved {
                best = model.clone();
            }
            if should_stop {
                break;
            }
        }
    }
    Ok(if hold_set.is_empty() { model } else { best })
}
