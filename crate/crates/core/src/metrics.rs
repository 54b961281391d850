//! Confusion matrices, IoU / mIoU, annotation precision and retention.
//!
//! Pixels whose ground truth is [`IGNORE`] are never counted. A prediction
//! of [`IGNORE`] on a non-void pixel counts as a miss for the ground-truth
//! class (false negative) without crediting any predicted class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qualityfilter::{QualityMask, KEEP};
use crate::segmodel::{LabelMask, IGNORE};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    /// Per ground-truth class: pixels predicted as IGNORE.
    missed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            missed: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn missed(&self, gt: usize) -> u64 {
        self.missed[gt]
    }

    /// Number of non-void pixels evaluated.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.missed.iter().sum::<u64>()
    }

    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        pred.same_shape(gt)?;
        let c = self.num_classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= c {
                return Err(Error::data(format!("ground-truth class {g} >= {c}")));
            }
            if p == IGNORE {
                self.missed[g as usize] += 1;
            } else if p as usize >= c {
                return Err(Error::data(format!("predicted class {p} >= {c}")));
            } else {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(format!(
                "merging {}-class and {}-class confusion matrices",
                self.num_classes, other.num_classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.missed.iter_mut().zip(&other.missed).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Pixels of ground-truth class `c`.
    pub fn support(&self, c: usize) -> u64 {
        let n = self.num_classes;
        self.counts[c * n..(c + 1) * n].iter().sum::<u64>() + self.missed[c]
    }
}

/// Confusion counts of one prediction against ground truth.
pub fn confusion(pred: &LabelMask, gt: &LabelMask, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// `IoU_c = TP / (TP + FP + FN)`; classes with an empty union are left out
/// of the mean.
pub fn iou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let n = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_ = cm.support(c) - tp;
            let fp = (0..n).map(|g| cm.get(g, c)).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::data("no class present in prediction or ground truth"));
    }
    Ok(IouReport {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

/// Running counts for per-class annotation precision.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionCounts {
    pub correct: Vec<u64>,
    pub predicted: Vec<u64>,
}

impl PrecisionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            correct: vec![0; num_classes],
            predicted: vec![0; num_classes],
        }
    }

    /// Counts pixels with non-void ground truth whose annotation is a class
    /// and, when `quality` is given, which the filter kept.
    pub fn accumulate(&mut self, auto: &LabelMask, gt: &LabelMask, quality: Option<&QualityMask>) -> Result<()> {
        auto.same_shape(gt)?;
        if let Some(q) = quality {
            if (q.height(), q.width()) != (gt.height(), gt.width()) {
                return Err(Error::shape("quality mask does not match annotation"));
            }
        }
        let c = self.correct.len();
        for (i, (&a, &g)) in auto.data().iter().zip(gt.data()).enumerate() {
            if g == IGNORE || a == IGNORE {
                continue;
            }
            if quality.is_some_and(|q| q.data()[i] != KEEP) {
                continue;
            }
            if a as usize >= c || g as usize >= c {
                return Err(Error::data(format!("class id {} >= {c}", a.max(g))));
            }
            self.predicted[a as usize] += 1;
            if a == g {
                self.correct[a as usize] += 1;
            }
        }
        Ok(())
    }

    /// `None` for classes with no counted annotated pixels.
    pub fn precision(&self) -> Vec<Option<f64>> {
        self.correct
            .iter()
            .zip(&self.predicted)
            .map(|(&c, &p)| (p > 0).then(|| c as f64 / p as f64))
            .collect()
    }
}

/// Per-class precision of an annotation relative to ground truth, over
/// non-void pixels that were kept (all of them when `quality` is `None`).
pub fn annotation_precision(
    auto: &LabelMask,
    gt: &LabelMask,
    quality: Option<&QualityMask>,
    num_classes: usize,
) -> Result<Vec<Option<f64>>> {
    let mut counts = PrecisionCounts::new(num_classes);
    counts.accumulate(auto, gt, quality)?;
    Ok(counts.precision())
}

/// Running counts of kept vs. total non-void pixels per ground-truth class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionCounts {
    pub kept: Vec<u64>,
    pub total: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub overall: f64,
    pub per_class: Vec<Option<f64>>,
}

impl RetentionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            kept: vec![0; num_classes],
            total: vec![0; num_classes],
        }
    }

    pub fn accumulate(&mut self, quality: &QualityMask, gt: &LabelMask) -> Result<()> {
        if (quality.height(), quality.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape("quality mask does not match ground truth"));
        }
        let c = self.kept.len();
        for (&q, &g) in quality.data().iter().zip(gt.data()) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= c {
                return Err(Error::data(format!("ground-truth class {g} >= {c}")));
            }
            self.total[g as usize] += 1;
            if q == KEEP {
                self.kept[g as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> Result<RetentionReport> {
        let total: u64 = self.total.iter().sum();
        if total == 0 {
            return Err(Error::data("retention over zero non-void pixels"));
        }
        Ok(RetentionReport {
            overall: self.kept.iter().sum::<u64>() as f64 / total as f64,
            per_class: self
                .kept
                .iter()
                .zip(&self.total)
                .map(|(&k, &t)| (t > 0).then(|| k as f64 / t as f64))
                .collect(),
        })
    }
}

/// Fraction of non-void pixels the filter keeps, overall and per class.
pub fn retention_rate(quality: &QualityMask, gt: &LabelMask, num_classes: usize) -> Result<RetentionReport> {
    let mut counts = RetentionCounts::new(num_classes);
    counts.accumulate(quality, gt)?;
    counts.report()
}

/// Pearson correlation of paired samples; `None` with fewer than two
/// pairs or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use std::collections::HashSet;

    fn lm(h: usize, w: usize, d: &[u8]) -> LabelMask {
        LabelMask::new(h, w, d.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let m = lm(2, 2, &[0, 1, 1, 2]);
        let cm = confusion(&m, &m, 3).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(g, p) > 0, g == p);
            }
        }
        let r = iou(&cm).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class, vec![Some(1.0); 3]);
    }

    #[test]
    fn two_by_two_example() {
        let cm = confusion(&lm(2, 2, &[0, 0, 1, 1]), &lm(2, 2, &[0, 1, 1, 1]), 2).unwrap();
        let r = iou(&cm).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn void_ground_truth_counts_nothing() {
        let cm = confusion(&lm(1, 3, &[0, 1, 2]), &lm(1, 3, &[IGNORE; 3]), 3).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(iou(&cm).is_err());
        assert!(confusion(&lm(1, 1, &[5]), &lm(1, 1, &[0]), 3).is_err());
        assert!(confusion(&lm(1, 2, &[0, 0]), &lm(2, 1, &[0, 0]), 3).is_err());
    }

    #[test]
    fn precision_and_retention_examples() {
        let gt = lm(2, 2, &[0, 1, 1, 0]);
        let p = annotation_precision(&gt, &gt, None, 3).unwrap();
        assert_eq!(p, vec![Some(1.0), Some(1.0), None]);

        let auto = lm(2, 2, &[0, 0, 1, 0]);
        let only_right = QualityMask::new(2, 2, vec![1, 0, 1, 1]).unwrap();
        let p = annotation_precision(&auto, &gt, Some(&only_right), 2).unwrap();
        assert_eq!(p, vec![Some(1.0), Some(1.0)]);
        let p = annotation_precision(&auto, &gt, None, 2).unwrap();
        assert_eq!(p, vec![Some(2.0 / 3.0), Some(1.0)]);

        let all = QualityMask::filled(2, 2, KEEP);
        assert_eq!(retention_rate(&all, &gt, 2).unwrap().overall, 1.0);
        let three = QualityMask::new(2, 2, vec![1, 1, 0, 1]).unwrap();
        let r = retention_rate(&three, &gt, 2).unwrap();
        assert_eq!(r.overall, 0.75);
        assert_eq!(r.per_class, vec![Some(1.0), Some(0.5)]);
        assert!(retention_rate(&all, &lm(2, 2, &[IGNORE; 4]), 2).is_err());
    }

    #[test]
    fn confusion_matches_counting_oracle() {
        let mut rng = Rng::new(1);
        let vals = [0u8, 1, 2, IGNORE];
        for _ in 0..200 {
            let pred: Vec<u8> = (0..16).map(|_| vals[rng.below(4)]).collect();
            let gt: Vec<u8> = (0..16).map(|_| vals[rng.below(4)]).collect();
            let cm = confusion(&lm(4, 4, &pred), &lm(4, 4, &gt), 3).unwrap();
            for g in 0..3u8 {
                for p in 0..3u8 {
                    let n = pred.iter().zip(&gt).filter(|&(&a, &b)| a == p && b == g).count();
                    assert_eq!(cm.get(g as usize, p as usize), n as u64);
                }
            }
            assert_eq!(cm.total() as usize, gt.iter().filter(|&&g| g != IGNORE).count());
        }
    }

    #[test]
    fn iou_matches_set_oracle() {
        let mut rng = Rng::new(2);
        let vals = [0u8, 1, 2, 3, IGNORE];
        for _ in 0..200 {
            let pred: Vec<u8> = (0..25).map(|_| vals[rng.below(5)]).collect();
            let gt: Vec<u8> = (0..25).map(|_| vals[rng.below(5)]).collect();
            let r = match iou(&confusion(&lm(5, 5, &pred), &lm(5, 5, &gt), 4).unwrap()) {
                Ok(r) => r,
                Err(_) => continue,
            };
            for c in 0..4u8 {
                let g: HashSet<usize> = (0..25).filter(|&i| gt[i] == c).collect();
                let p: HashSet<usize> = (0..25).filter(|&i| pred[i] == c && gt[i] != IGNORE).collect();
                let union = g.union(&p).count();
                let expected = (union > 0).then(|| g.intersection(&p).count() as f64 / union as f64);
                assert_eq!(r.per_class[c as usize], expected);
            }
        }
    }

    #[test]
    fn confusion_is_additive() {
        let mut rng = Rng::new(3);
        let a_pred: Vec<u8> = (0..16).map(|_| rng.below(3) as u8).collect();
        let a_gt: Vec<u8> = (0..16).map(|_| rng.below(3) as u8).collect();
        let b_pred: Vec<u8> = (0..16).map(|_| rng.below(3) as u8).collect();
        let b_gt: Vec<u8> = (0..16).map(|_| rng.below(3) as u8).collect();
        let mut sum = confusion(&lm(4, 4, &a_pred), &lm(4, 4, &a_gt), 3).unwrap();
        sum.merge(&confusion(&lm(4, 4, &b_pred), &lm(4, 4, &b_gt), 3).unwrap())
            .unwrap();
        let cat = confusion(
            &lm(8, 4, &[a_pred, b_pred].concat()),
            &lm(8, 4, &[a_gt, b_gt].concat()),
            3,
        )
        .unwrap();
        assert_eq!(sum, cat);
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }
}
