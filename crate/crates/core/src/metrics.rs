//! OOD detection metrics (AUROC, AP, FPR at 95% TPR) with OOD as the
//! positive class, and seen-class segmentation metrics on inlier pixels.
//!
//! Ties are handled by grouping equal scores into a single threshold, and
//! AUROC counts tied positive/negative pairs as one half.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::IGNORE_LABEL;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredPixels {
    pub scores: Vec<f64>,
    pub is_ood: Vec<bool>,
}

impl ScoredPixels {
    pub fn new(scores: Vec<f64>, is_ood: Vec<bool>) -> Result<Self> {
        if scores.len() != is_ood.len() {
            return Err(Error::Shape(format!(
                "{} scores vs {} labels",
                scores.len(),
                is_ood.len()
            )));
        }
        Ok(Self { scores, is_ood })
    }

    pub fn extend(&mut self, scores: &[f64], is_ood: &[bool]) {
        self.scores.extend_from_slice(scores);
        self.is_ood.extend_from_slice(is_ood);
    }

    pub fn positives(&self) -> usize {
        self.is_ood.iter().filter(|&&o| o).count()
    }

    fn counts(&self) -> Result<(u64, u64)> {
        let p = self.positives() as u64;
        let n = self.is_ood.len() as u64 - p;
        if p == 0 || n == 0 {
            return Err(Error::UndefinedMetric(format!(
                "need both OOD and inlier pixels, got {p} OOD and {n} inlier"
            )));
        }
        Ok((p, n))
    }

    /// `(positives, negatives)` per distinct score, in descending score order.
    fn descending_groups(&self) -> Vec<(u64, u64)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(u64, u64)> = Vec::new();
        let mut last: Option<f64> = None;
        for i in idx {
            let s = self.scores[i];
            if last != Some(s) {
                groups.push((0, 0));
                last = Some(s);
            }
            let g = groups.last_mut().expect("pushed above");
            if self.is_ood[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

/// Probability that a random OOD pixel outscores a random inlier pixel.
pub fn auroc(sp: &ScoredPixels) -> Result<f64> {
    let (p, n) = sp.counts()?;
    // Twice the Mann-Whitney U, kept integral.
    let mut u2: u64 = 0;
    let mut neg_below: u64 = 0;
    for &(pos, neg) in sp.descending_groups().iter().rev() {
        u2 += pos * (2 * neg_below + neg);
        neg_below += neg;
    }
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// `sum_n (R_n - R_{n-1}) P_n` over descending thresholds.
pub fn average_precision(sp: &ScoredPixels) -> Result<f64> {
    let (p, _) = sp.counts()?;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut ap = 0.0;
    for (pos, neg) in sp.descending_groups() {
        tp += pos;
        fp += neg;
        if pos > 0 {
            ap += (pos as f64 / p as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// Smallest false-positive rate among thresholds `score >= t` whose
/// true-positive rate reaches 95%.
pub fn fpr_at_95_tpr(sp: &ScoredPixels) -> Result<f64> {
    let (p, n) = sp.counts()?;
    let mut tp = 0u64;
    let mut fp = 0u64;
    for (pos, neg) in sp.descending_groups() {
        tp += pos;
        fp += neg;
        if 100 * tp >= 95 * p {
            return Ok(fp as f64 / n as f64);
        }
    }
    unreachable!("the lowest threshold admits every positive")
}

/// Confusion counts over seen classes, restricted to inlier pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    /// Row = true class, column = predicted class (both 0-based).
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Accumulate one image; `pred` and `truth` hold 1-based labels.
    pub fn add(&mut self, pred: &[u8], truth: &[u8], ood_mask: &[bool]) -> Result<()> {
        if pred.len() != truth.len() || truth.len() != ood_mask.len() {
            return Err(Error::Shape(
                "prediction, truth and mask lengths differ".into(),
            ));
        }
        let c = self.num_classes;
        for ((&p, &t), &ood) in pred.iter().zip(truth).zip(ood_mask) {
            if ood || t == IGNORE_LABEL || t as usize > c {
                continue;
            }
            let p = (p as usize).clamp(1, c);
            self.counts[(t as usize - 1) * c + (p - 1)] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `(mIoU, mAcc)` over classes present in the ground truth.
    pub fn scores(&self) -> (f64, f64) {
        let c = self.num_classes;
        let mut iou_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut present = 0;
        for k in 0..c {
            let row: u64 = (0..c).map(|j| self.counts[k * c + j]).sum();
            if row == 0 {
                continue;
            }
            let col: u64 = (0..c).map(|j| self.counts[j * c + k]).sum();
            let tp = self.counts[k * c + k];
            iou_sum += tp as f64 / (row + col - tp) as f64;
            acc_sum += tp as f64 / row as f64;
            present += 1;
        }
        if present == 0 {
            return (f64::NAN, f64::NAN);
        }
        (iou_sum / present as f64, acc_sum / present as f64)
    }
}

/// Mean IoU and mean accuracy over seen classes on inlier pixels.
pub fn seg_metrics(
    pred: &[u8],
    truth: &[u8],
    ood_mask: &[bool],
    num_classes: usize,
) -> Result<(f64, f64)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, truth, ood_mask)?;
    Ok(cm.scores())
}

/// Score histogram split by ground truth, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub inlier: Vec<u64>,
    pub outlier: Vec<u64>,
}

pub fn histogram(sp: &ScoredPixels, bins: usize) -> Histogram {
    let (lo, hi) = sp
        .scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| {
            (a.min(s), b.max(s))
        });
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (lo.min(0.0), lo.max(0.0) + 1.0)
    };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut inlier = vec![0; bins];
    let mut outlier = vec![0; bins];
    for (&s, &o) in sp.scores.iter().zip(&sp.is_ood) {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        if o {
            outlier[b] += 1;
        } else {
            inlier[b] += 1;
        }
    }
    Histogram {
        edges,
        inlier,
        outlier,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(inliers: &[f64], ood: &[f64]) -> ScoredPixels {
        let mut scores = inliers.to_vec();
        scores.extend_from_slice(ood);
        let mut is_ood = vec![false; inliers.len()];
        is_ood.extend(std::iter::repeat_n(true, ood.len()));
        ScoredPixels::new(scores, is_ood).unwrap()
    }

    #[test]
    fn auroc_spot_values() {
        assert_eq!(auroc(&sp(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 1.0);
        assert_eq!(auroc(&sp(&[0.1, 0.9], &[0.5])).unwrap(), 0.5);
        assert_eq!(auroc(&sp(&[0.3; 5], &[0.3; 3])).unwrap(), 0.5);
        assert!(matches!(
            auroc(&sp(&[0.1], &[])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ap_and_fpr_spot_values() {
        assert_eq!(
            average_precision(&sp(&[0.1, 0.2], &[0.8, 0.9])).unwrap(),
            1.0
        );
        assert_eq!(average_precision(&sp(&[0.5; 6], &[0.5; 2])).unwrap(), 0.25);
        assert_eq!(fpr_at_95_tpr(&sp(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 0.0);
        assert_eq!(fpr_at_95_tpr(&sp(&[0.5; 6], &[0.5; 2])).unwrap(), 1.0);
        // Positives at 0.9, 0.4; negatives at 0.7, 0.1. Thresholds 0.9 (R=.5, P=1), 0.4 (R=1, P=2/3).
        let s = sp(&[0.7, 0.1], &[0.9, 0.4]);
        assert!((average_precision(&s).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(fpr_at_95_tpr(&s).unwrap(), 0.5);
    }

    #[test]
    fn seg_metrics_cases() {
        let truth = [1, 1, 2, 2];
        let mask = [false; 4];
        assert_eq!(seg_metrics(&truth, &truth, &mask, 2).unwrap(), (1.0, 1.0));
        assert_eq!(seg_metrics(&[2, 2, 1, 1], &truth, &mask, 2).unwrap().0, 0.0);

        // 4x4 hand-built case, 3 classes, last row is OOD and excluded.
        #[rustfmt::skip]
        let truth = [1, 1, 1, 2,
                     1, 2, 2, 2,
                     3, 3, 3, 3,
                     4, 4, 4, 4];
        #[rustfmt::skip]
        let pred =  [1, 1, 2, 2,
                     1, 2, 2, 3,
                     3, 3, 1, 3,
                     1, 1, 1, 1];
        let mask: Vec<bool> = truth.iter().map(|&t| t == 4).collect();
        // Class 1: tp 3, fn 1, fp 1 -> IoU 3/5, acc 3/4.
        // Class 2: tp 3, fn 1, fp 1 -> IoU 3/5, acc 3/4.
        // Class 3: tp 3, fn 1, fp 1 -> IoU 3/5, acc 3/4.
        let (miou, macc) = seg_metrics(&pred, &truth, &mask, 3).unwrap();
        assert!((miou - 0.6).abs() < 1e-12);
        assert!((macc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let truth = [1, 1, 1];
        let (miou, macc) = seg_metrics(&[1, 1, 2], &truth, &[false; 3], 3).unwrap();
        assert!((miou - 2.0 / 3.0).abs() < 1e-12);
        assert!((macc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_counts_every_pixel() {
        let s = sp(&[0.0, 0.5, 1.0], &[2.0, 2.0]);
        let h = histogram(&s, 4);
        assert_eq!(h.edges.len(), 5);
        assert_eq!(h.inlier.iter().sum::<u64>(), 3);
        assert_eq!(h.outlier, vec![0, 0, 0, 2]);
    }
}
