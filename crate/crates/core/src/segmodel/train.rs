use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{softmax_in_place, Mask, PixelFeatures, SegModel};
use crate::error::{Error, Result};

/// SGD settings. `Default` is the from-scratch setup: lr 0.002, momentum 0.9,
/// weight decay 1e-4, batch 8, 200 epochs, patience 10, poly power 0.9.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub poly_power: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 200,
            patience: 10,
            poly_power: 0.9,
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// Fine-tuning preset (lr 0.0001).
    pub fn fine_tune() -> Self {
        Hyperparams {
            lr: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be a non-negative number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be positive"));
        }
        if self.poly_power.is_nan() || self.poly_power < 0.0 {
            return Err(Error::invalid("poly power must be non-negative"));
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter / total_iters)^power`.
pub fn poly_lr(iter: usize, total_iters: usize, base_lr: f64, power: f64) -> f64 {
    if total_iters == 0 {
        return base_lr;
    }
    let frac = 1.0 - iter.min(total_iters) as f64 / total_iters as f64;
    base_lr * frac.powf(power)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SegModel,
    /// Mean training loss of each epoch, measured on the fly.
    pub loss_trace: Vec<f64>,
    /// Validation loss after each epoch (empty without a validation set).
    pub val_trace: Vec<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

/// Accumulates the summed loss and logit-chained weight gradient of one image.
fn accumulate(
    model: &SegModel,
    x: &PixelFeatures,
    mask: &Mask,
    grad: &mut [f64],
    scratch: &mut [f64],
) -> f64 {
    let f = model.feature_dim();
    let stride = f + 1;
    let mut loss = 0.0;
    for (i, &y) in mask.classes().iter().enumerate() {
        let px = x.pixel(i);
        model.logits_into(px, scratch);
        softmax_in_place(scratch);
        loss -= scratch[y as usize].max(f64::MIN_POSITIVE).ln();
        scratch[y as usize] -= 1.0;
        for (c, &d) in scratch.iter().enumerate() {
            let g = &mut grad[c * stride..(c + 1) * stride];
            for (gj, &v) in g[..f].iter_mut().zip(px) {
                *gj += d * v as f64;
            }
            g[f] += d;
        }
    }
    loss
}

/// Mean per-pixel cross-entropy over `data` and its gradient with respect to
/// the model weights, laid out like [`SegModel::weights`]. Weight decay is not
/// included.
pub fn loss_and_gradient(model: &SegModel, data: &[(&PixelFeatures, &Mask)]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.weights().len()];
    let mut scratch = vec![0.0; model.num_classes()];
    let mut loss = 0.0;
    let mut pixels = 0usize;
    for (x, mask) in data {
        check_example(model, x, mask)?;
        loss += accumulate(model, x, mask, &mut grad, &mut scratch);
        pixels += mask.len();
    }
    if pixels == 0 {
        return Err(Error::EmptyDataset);
    }
    let scale = 1.0 / pixels as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Mean per-pixel cross-entropy of `model` over a dataset.
pub(crate) fn mean_loss(model: &SegModel, data: &[(&PixelFeatures, &Mask)]) -> f64 {
    let mut scratch = vec![0.0; model.num_classes()];
    let mut loss = 0.0;
    let mut pixels = 0usize;
    for (x, mask) in data {
        for (i, &y) in mask.classes().iter().enumerate() {
            model.logits_into(x.pixel(i), &mut scratch);
            softmax_in_place(&mut scratch);
            loss -= scratch[y as usize].max(f64::MIN_POSITIVE).ln();
        }
        pixels += mask.len();
    }
    loss / pixels.max(1) as f64
}

fn check_example(model: &SegModel, x: &PixelFeatures, mask: &Mask) -> Result<()> {
    model.check_features(x)?;
    if x.height() != mask.height() || x.width() != mask.width() {
        return Err(Error::ShapeMismatch(format!(
            "features {}x{} vs mask {}x{}",
            x.height(),
            x.width(),
            mask.height(),
            mask.width()
        )));
    }
    mask.validate(model.num_classes())
}

/// Minibatch SGD with momentum, weight decay and a polynomial learning-rate
/// schedule over all `epochs * ceil(N / batch)` iterations.
///
/// Every pixel in a batch carries equal weight. After each epoch the
/// monitored loss (validation loss if `val` is given, the epoch's training
/// loss otherwise) is compared to the best so far; training stops after
/// `patience` epochs without improvement and the best weights are returned.
pub fn train(
    model: &SegModel,
    dataset: &[(&PixelFeatures, &Mask)],
    hp: &Hyperparams,
    val: Option<&[(&PixelFeatures, &Mask)]>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    hp.validate()?;
    for (x, m) in dataset.iter().chain(val.unwrap_or(&[]).iter()) {
        check_example(model, x, m)?;
    }

    let mut model = model.clone();
    let n_weights = model.weights().len();
    let mut velocity = vec![0.0; n_weights];
    let mut grad = vec![0.0; n_weights];
    let mut scratch = vec![0.0; model.num_classes()];
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let steps_per_epoch = dataset.len().div_ceil(hp.batch_size);
    let total_iters = hp.epochs * steps_per_epoch;

    let mut best = (f64::INFINITY, model.clone(), 0usize);
    let mut stale = 0;
    let mut loss_trace = Vec::new();
    let mut val_trace = Vec::new();
    let mut iter = 0;
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_pixels = 0usize;
        for batch in order.chunks(hp.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            let mut pixels = 0usize;
            for &i in batch {
                let (x, m) = dataset[i];
                batch_loss += accumulate(&model, x, m, &mut grad, &mut scratch);
                pixels += m.len();
            }
            epoch_loss += batch_loss;
            epoch_pixels += pixels;

            let lr = poly_lr(iter, total_iters, hp.lr, hp.poly_power);
            let scale = 1.0 / pixels as f64;
            for ((w, v), g) in model.weights_mut().iter_mut().zip(&mut velocity).zip(&grad) {
                let step = g * scale + hp.weight_decay * *w;
                *v = hp.momentum * *v + step;
                *w -= lr * *v;
            }
            iter += 1;
        }
        let train_loss = epoch_loss / epoch_pixels as f64;
        if !train_loss.is_finite() {
            return Err(Error::invalid(format!("training diverged at epoch {epoch}")));
        }
        loss_trace.push(train_loss);
        let monitored = match val {
            Some(v) if !v.is_empty() => {
                let l = mean_loss(&model, v);
                val_trace.push(l);
                l
            }
            _ => train_loss,
        };
        if monitored < best.0 {
            best = (monitored, model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= hp.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        epochs_run: loss_trace.len(),
        best_epoch: best.2,
        model: best.1,
        loss_trace,
        val_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodel::{cross_entropy, pseudo_label, softmax_forward, FEATURE_DIM};
    use crate::raster::Raster;

    #[test]
    fn poly_lr_examples() {
        assert_eq!(poly_lr(0, 100, 0.002, 0.9), 0.002);
        assert_eq!(poly_lr(100, 100, 0.002, 0.9), 0.0);
        let mid = poly_lr(50, 100, 0.002, 0.9);
        assert!((mid - 0.002 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert!((mid - 0.001072).abs() < 1e-6);
    }

    #[test]
    fn default_hyperparameters() {
        let hp = Hyperparams::default();
        assert_eq!(
            (hp.lr, hp.momentum, hp.weight_decay, hp.batch_size, hp.epochs, hp.patience),
            (0.002, 0.9, 1e-4, 8, 200, 10)
        );
        assert_eq!(Hyperparams::fine_tune().lr, 1e-4);
    }

    #[test]
    fn empty_dataset_rejected() {
        let m = SegModel::zeros(2, FEATURE_DIM).unwrap();
        assert!(matches!(
            train(&m, &[], &Hyperparams::default(), None),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn single_pixel_converges() {
        let x = PixelFeatures::from_raster(&Raster::filled(1, 1, [200, 30, 30]));
        let y = Mask::filled(1, 1, 1);
        let hp = Hyperparams {
            batch_size: 1,
            epochs: 200,
            ..Hyperparams::default()
        };
        let out = train(&SegModel::zeros(2, FEATURE_DIM).unwrap(), &[(&x, &y)], &hp, None).unwrap();
        assert_eq!(out.epochs_run, 200);
        assert_eq!(pseudo_label(&out.model, &x).unwrap().classes(), &[1]);
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let x = PixelFeatures::from_raster(&Raster::filled(2, 2, [10, 30, 30]));
        let y = Mask::filled(2, 2, 1);
        let start = SegModel::from_weights(2, FEATURE_DIM, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let hp = Hyperparams {
            lr: 0.0,
            epochs: 5,
            ..Hyperparams::default()
        };
        let out = train(&start, &[(&x, &y)], &hp, None).unwrap();
        assert_eq!(out.model.weights(), start.weights());
    }

    #[test]
    fn fused_gradient_matches_composed_path() {
        let mut img = Raster::filled(2, 3, [0, 0, 0]);
        for r in 0..2 {
            for c in 0..3 {
                img.set_pixel(r, c, [(r * 90) as u8, (c * 70) as u8, 33]);
            }
        }
        let x = PixelFeatures::from_raster(&img);
        let y = Mask::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let m = SegModel::from_weights(3, FEATURE_DIM, (0..18).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect()).unwrap();
        let mut grad = vec![0.0; 18];
        let mut scratch = vec![0.0; 3];
        let loss = accumulate(&m, &x, &y, &mut grad, &mut scratch) / 6.0;

        let probs = softmax_forward(&m, &x).unwrap();
        let (ref_loss, dlogits) = cross_entropy(&probs, &y, None).unwrap();
        assert!((loss - ref_loss).abs() < 1e-12);
        let mut ref_grad = vec![0.0; 18];
        for i in 0..6 {
            for c in 0..3 {
                let d = dlogits[i * 3 + c];
                for (j, &v) in x.pixel(i).iter().enumerate() {
                    ref_grad[c * 6 + j] += d * v as f64;
                }
                ref_grad[c * 6 + 5] += d;
            }
        }
        for (a, b) in grad.iter().zip(&ref_grad) {
            assert!((a / 6.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stopping_respects_patience() {
        let x = PixelFeatures::from_raster(&Raster::filled(1, 1, [200, 30, 30]));
        let y = Mask::filled(1, 1, 0);
        let hp = Hyperparams {
            lr: 0.0,
            epochs: 50,
            patience: 3,
            ..Hyperparams::default()
        };
        let out = train(&SegModel::zeros(2, FEATURE_DIM).unwrap(), &[(&x, &y)], &hp, None).unwrap();
        assert_eq!(out.epochs_run, 4);
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn loss_trace_non_increasing_on_separable_data() {
        let images: Vec<(PixelFeatures, Mask)> = (0..8u8)
            .map(|i| {
                let mut img = Raster::filled(4, 6, [0, 0, 0]);
                let mut classes = Vec::new();
                for r in 0..4 {
                    for c in 0..6 {
                        let left = c < 3;
                        let shade = 20 * i;
                        img.set_pixel(r, c, if left { [200, shade, 40] } else { [30, shade, 210] });
                        classes.push(if left { 0 } else { 1 });
                    }
                }
                (PixelFeatures::from_raster(&img), Mask::new(4, 6, classes).unwrap())
            })
            .collect();
        let data: Vec<(&PixelFeatures, &Mask)> = images.iter().map(|(x, y)| (x, y)).collect();
        for lr in [0.001, 0.01] {
            let hp = Hyperparams {
                lr,
                batch_size: 2,
                epochs: 40,
                patience: 40,
                ..Hyperparams::default()
            };
            let out = train(&SegModel::zeros(2, FEATURE_DIM).unwrap(), &data, &hp, None).unwrap();
            let smoothed: Vec<f64> = out.loss_trace.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
            for pair in smoothed[1..].windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12, "lr {lr}: {:?}", out.loss_trace);
            }
            assert!(out.loss_trace.last() < out.loss_trace.first());
        }
    }

    #[test]
    fn loss_and_gradient_averages_over_pixels() {
        let x = PixelFeatures::from_raster(&Raster::filled(2, 2, [10, 200, 30]));
        let y = Mask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let m = SegModel::from_weights(2, FEATURE_DIM, (0..12).map(|i| i as f64 * 0.05 - 0.3).collect()).unwrap();
        let (loss, grad) = loss_and_gradient(&m, &[(&x, &y), (&x, &y)]).unwrap();
        let (single, single_grad) = loss_and_gradient(&m, &[(&x, &y)]).unwrap();
        assert!((loss - single).abs() < 1e-15);
        assert!((loss - mean_loss(&m, &[(&x, &y)])).abs() < 1e-15);
        for (a, b) in grad.iter().zip(&single_grad) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(loss_and_gradient(&m, &[]), Err(Error::EmptyDataset)));
    }
}
