//! Per-pixel softmax segmentation model.
//!
//! Each pixel is described by `(r, g, b, row / H, col / W)` with colours
//! scaled to `[0, 1]`; the model is a `C x (f + 1)` weight matrix whose last
//! column is the bias.

mod metrics;
mod train;

use std::path::Path;

pub use metrics::{confusion, evaluate, iou_report, ConfusionMatrix, IoUReport};
pub use train::{loss_and_gradient, poly_lr, train, Hyperparams, TrainOutcome};

use crate::binfmt::{self, ByteReader};
use crate::error::{Error, Result};
pub use crate::raster::Mask;
use crate::raster::Raster;

pub const EDSM_MAGIC: &[u8; 4] = b"EDSM";
pub const EDSM_VERSION: u32 = 1;
pub const FEATURE_DIM: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatures {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl PixelFeatures {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{dim} features need {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature {v}")));
        }
        Ok(PixelFeatures {
            height,
            width,
            dim,
            data,
        })
    }

    /// The fixed toy featurization.
    pub fn from_raster(image: &Raster) -> Self {
        let (h, w) = (image.height(), image.width());
        let mut data = Vec::with_capacity(h * w * FEATURE_DIM);
        for row in 0..h {
            for col in 0..w {
                let p = image.pixel(row, col);
                data.extend_from_slice(&[
                    p[0] as f32 / 255.0,
                    p[1] as f32 / 255.0,
                    p[2] as f32 / 255.0,
                    row as f32 / h as f32,
                    col as f32 / w as f32,
                ]);
            }
        }
        PixelFeatures {
            height: h,
            width: w,
            dim: FEATURE_DIM,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Row-major per-pixel class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl Probabilities {
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    classes: usize,
    features: usize,
    weights: Vec<f64>,
}

impl SegModel {
    pub fn zeros(classes: usize, features: usize) -> Result<Self> {
        if classes == 0 || features == 0 {
            return Err(Error::invalid("model needs at least one class and one feature"));
        }
        Ok(SegModel {
            classes,
            features,
            weights: vec![0.0; classes * (features + 1)],
        })
    }

    pub fn from_weights(classes: usize, features: usize, weights: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(classes, features)?;
        if weights.len() != m.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: m.weights.len(),
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("non-finite weight"));
        }
        m.weights = weights;
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub(crate) fn check_features(&self, x: &PixelFeatures) -> Result<()> {
        if x.dim() != self.features {
            return Err(Error::DimensionMismatch {
                expected: self.features,
                actual: x.dim(),
            });
        }
        Ok(())
    }

    /// Logits of one pixel into `out`.
    #[inline]
    pub(crate) fn logits_into(&self, x: &[f32], out: &mut [f64]) {
        let stride = self.features + 1;
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * stride..(c + 1) * stride];
            let mut z = row[self.features];
            for (w, &v) in row[..self.features].iter().zip(x) {
                z += w * v as f64;
            }
            *o = z;
        }
    }

    pub fn logits(&self, x: &PixelFeatures) -> Result<Vec<f64>> {
        self.check_features(x)?;
        let mut out = vec![0.0; x.pixels() * self.classes];
        for (i, chunk) in out.chunks_mut(self.classes).enumerate() {
            self.logits_into(x.pixel(i), chunk);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.weights.len() * 4);
        out.extend_from_slice(EDSM_MAGIC);
        out.extend_from_slice(&EDSM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.features as u32).to_le_bytes());
        for &w in &self.weights {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(EDSM_MAGIC)?;
        let version = r.u32("version")?;
        if version != EDSM_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let classes = r.u32("classes")? as usize;
        let features = r.u32("features")? as usize;
        let n = classes * (features + 1);
        if r.remaining() != n * 4 {
            return Err(Error::Truncated(format!(
                "{classes}x{} weights need {} bytes, found {}",
                features + 1,
                n * 4,
                r.remaining()
            )));
        }
        let weights = (0..n)
            .map(|_| r.f32("weights").map(|w| w as f64))
            .collect::<Result<Vec<_>>>()?;
        Self::from_weights(classes, features, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binfmt::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binfmt::read_file(path)?)
    }
}

/// Numerically stable softmax in place.
#[inline]
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_forward(model: &SegModel, x: &PixelFeatures) -> Result<Probabilities> {
    let mut data = model.logits(x)?;
    for chunk in data.chunks_mut(model.classes) {
        softmax_in_place(chunk);
    }
    Ok(Probabilities {
        height: x.height(),
        width: x.width(),
        classes: model.classes,
        data,
    })
}

/// Weighted mean of `-ln p(true class)` and its gradient with respect to the
/// logits, `w_i (p_i - onehot_i) / sum(w)` per pixel. Without weights every
/// pixel counts once.
pub fn cross_entropy(
    probs: &Probabilities,
    mask: &Mask,
    pixel_weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    if probs.height != mask.height() || probs.width != mask.width() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {}x{} vs mask {}x{}",
            probs.height,
            probs.width,
            mask.height(),
            mask.width()
        )));
    }
    mask.validate(probs.classes)?;
    if let Some(w) = pixel_weights {
        if w.len() != mask.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} pixel weights for {} pixels",
                w.len(),
                mask.len()
            )));
        }
    }
    let weight = |i: usize| pixel_weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..mask.len()).map(weight).sum();
    if total <= 0.0 {
        return Err(Error::invalid("pixel weights sum to zero"));
    }
    let c = probs.classes;
    let mut loss = 0.0;
    let mut grad = probs.data.clone();
    for (i, &y) in mask.classes().iter().enumerate() {
        let w = weight(i);
        let p = probs.pixel(i);
        loss -= w * p[y as usize].max(f64::MIN_POSITIVE).ln();
        let g = &mut grad[i * c..(i + 1) * c];
        g[y as usize] -= 1.0;
        g.iter_mut().for_each(|v| *v *= w / total);
    }
    Ok((loss / total, grad))
}

/// Hard labels: per-pixel argmax, ties to the lowest class index.
pub fn argmax_mask(probs: &Probabilities) -> Mask {
    let classes = (0..probs.pixels())
        .map(|i| argmax(probs.pixel(i)) as u8)
        .collect();
    Mask::new(probs.height, probs.width, classes).expect("shape from probabilities")
}

#[inline]
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn pseudo_label(model: &SegModel, x: &PixelFeatures) -> Result<Mask> {
    if model.num_classes() > 256 {
        return Err(Error::invalid("more than 256 classes cannot be stored in a mask"));
    }
    Ok(argmax_mask(&softmax_forward(model, x)?))
}
