use serde::{Deserialize, Serialize};

use super::{pseudo_label, Mask, PixelFeatures, SegModel};
use crate::error::{Error, Result};

/// `counts[g * C + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        if !pred.same_shape(gt) {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        pred.validate(self.classes)?;
        gt.validate(self.classes)?;
        for (&p, &g) in pred.classes().iter().zip(gt.classes()) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::DimensionMismatch {
                expected: self.classes,
                actual: other.classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(pred: &Mask, gt: &Mask, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// Jaccard index per class; `None` when the class appears in neither mask.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Per-class `TP / (TP + FP + FN)` and their mean over defined classes.
pub fn iou_report(cm: &ConfusionMatrix) -> IoUReport {
    let c = cm.classes();
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| cm.get(k, p)).sum();
            let fp: u64 = (0..c).filter(|&g| g != k).map(|g| cm.get(g, k)).sum();
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    IoUReport { per_class, miou }
}

/// Confusion of the model's hard predictions over a labeled set.
pub fn evaluate(model: &SegModel, data: &[(&PixelFeatures, &Mask)]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for (x, gt) in data {
        cm.add(&pseudo_label(model, x)?, gt)?;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn identical_masks() {
        let m = Mask::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let r = iou_report(&confusion(&m, &m, 4).unwrap());
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), Some(1.0), None]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn hand_example() {
        let gt = Mask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let pred = Mask::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let r = iou_report(&confusion(&pred, &gt, 2).unwrap());
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 0.58333).abs() < 1e-5);
    }

    #[test]
    fn disjoint_is_zero() {
        let gt = Mask::filled(3, 3, 0);
        let pred = Mask::filled(3, 3, 1);
        let r = iou_report(&confusion(&pred, &gt, 2).unwrap());
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0)]);
        assert_eq!(r.miou, 0.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(confusion(&Mask::filled(2, 2, 0), &Mask::filled(2, 3, 0), 2).is_err());
    }

    proptest! {
        #[test]
        fn matches_set_based_iou(h in 1usize..=8, w in 1usize..=8, c in 1usize..=4, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || Mask::new(h, w, (0..h * w).map(|_| rng.random_range(0..c) as u8).collect()).unwrap();
            let (gt, pred) = (draw(), draw());
            let cm = confusion(&pred, &gt, c).unwrap();
            prop_assert_eq!(cm.total(), (h * w) as u64);
            let r = iou_report(&cm);
            for k in 0..c {
                let a: HashSet<usize> = (0..h * w).filter(|&i| gt.classes()[i] as usize == k).collect();
                let b: HashSet<usize> = (0..h * w).filter(|&i| pred.classes()[i] as usize == k).collect();
                let union = a.union(&b).count();
                let expected = (union > 0).then(|| a.intersection(&b).count() as f64 / union as f64);
                prop_assert_eq!(r.per_class[k], expected);
            }
            prop_assert!((0.0..=1.0).contains(&r.miou));
        }
    }
}
