//! Segmentation and classification metrics: confusion counts, mIoU,
//! per-class precision/recall/F1, and cluster-rate error statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts `x[i][j]`: units of true class `i` predicted as class `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_labels(pred: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::dims(truth.len(), pred.len()));
        }
        let mut cm = Self::new(classes);
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= classes || t >= classes {
                return Err(Error::InvalidData(format!(
                    "label {} outside 0..{classes}",
                    p.max(t)
                )));
            }
            cm.counts[t * classes + p] += 1;
        }
        Ok(cm)
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    /// Element-wise sum with another matrix of the same class count.
    pub fn add_counts(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dims(self.classes, other.classes));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, cls: usize) -> u64 {
        self.get(cls, cls)
    }

    pub fn false_positives(&self, cls: usize) -> u64 {
        (0..self.classes).filter(|&i| i != cls).map(|i| self.get(i, cls)).sum()
    }

    pub fn false_negatives(&self, cls: usize) -> u64 {
        (0..self.classes).filter(|&j| j != cls).map(|j| self.get(cls, j)).sum()
    }
}

/// Mean intersection-over-union over the classes present in either mask.
pub fn miou(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    let cm = ConfusionCounts::from_labels(pred, truth, classes)?;
    miou_from_counts(&cm)
}

pub fn miou_from_counts(cm: &ConfusionCounts) -> Result<f64> {
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..cm.classes {
        let tp = cm.true_positives(c);
        let union = tp + cm.false_positives(c) + cm.false_negatives(c);
        if union == 0 {
            continue;
        }
        sum += tp as f64 / union as f64;
        present += 1;
    }
    if present == 0 {
        return Err(Error::InvalidData("mIoU of empty masks is undefined".into()));
    }
    Ok(sum / present as f64)
}

/// Binary-mask convenience for vegetation masks (0/1 per pixel).
pub fn binary_miou(pred: &[u8], truth: &[u8]) -> Result<f64> {
    let p: Vec<usize> = pred.iter().map(|&v| usize::from(v != 0)).collect();
    let t: Vec<usize> = truth.iter().map(|&v| usize::from(v != 0)).collect();
    miou(&p, &t, 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degenerate {
    /// TP + FP = 0: the class was never predicted.
    NoPredictions,
    /// TP + FN = 0: the class never occurs in the ground truth.
    NoGroundTruth,
    /// Precision and recall are both zero.
    ZeroPrecisionAndRecall,
}

/// Precision, recall and F1 for one class; `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub flags: Vec<Degenerate>,
}

pub fn precision_recall_f1(cm: &ConfusionCounts, cls: usize) -> ClassScores {
    let tp = cm.true_positives(cls) as f64;
    let fp = cm.false_positives(cls) as f64;
    let fn_ = cm.false_negatives(cls) as f64;
    let mut flags = Vec::new();
    let precision = if tp + fp > 0.0 {
        Some(tp / (tp + fp))
    } else {
        flags.push(Degenerate::NoPredictions);
        None
    };
    let recall = if tp + fn_ > 0.0 {
        Some(tp / (tp + fn_))
    } else {
        flags.push(Degenerate::NoGroundTruth);
        None
    };
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => {
            flags.push(Degenerate::ZeroPrecisionAndRecall);
            None
        }
        _ => None,
    };
    ClassScores {
        class: cls,
        precision,
        recall,
        f1,
        flags,
    }
}

/// Cluster-rate estimation error over correctly classified weed tiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityErrorReport {
    /// `1 - mean(|gt - est| / gt)`; may be negative when relative errors exceed 1.
    pub mean_accuracy: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub n: usize,
}

/// Error statistics for `(cr_gt, cr_est)` pairs; every `cr_gt` must be positive.
pub fn density_errors(pairs: &[(f64, f64)]) -> Result<DensityErrorReport> {
    if pairs.is_empty() {
        return Ok(DensityErrorReport {
            mean_accuracy: None,
            mae: None,
            rmse: None,
            n: 0,
        });
    }
    if let Some(&(gt, _)) = pairs.iter().find(|(gt, _)| !(*gt > 0.0)) {
        return Err(Error::InvalidData(format!(
            "ground-truth cluster rate must be positive, got {gt}"
        )));
    }
    let n = pairs.len() as f64;
    let mut rel = 0.0;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for &(gt, est) in pairs {
        let e = (gt - est).abs();
        rel += e / gt;
        abs += e;
        sq += e * e;
    }
    Ok(DensityErrorReport {
        mean_accuracy: Some(1.0 - rel / n),
        mae: Some(abs / n),
        rmse: Some((sq / n).sqrt()),
        n: pairs.len(),
    })
}

/// Evaluation summary in the layout of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub segmentation_miou: Option<f64>,
    /// Tile-level scores, class 0 = crop, class 1 = weed.
    pub tile_scores: Vec<ClassScores>,
    pub tile_confusion: ConfusionCounts,
    pub density: DensityErrorReport,
    /// Pixel-level scores of the dense map (0 soil, 1 crop, 2 weed), when computed.
    pub dense_scores: Vec<ClassScores>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks_score_one() {
        let m = [0, 1, 1, 0, 1];
        assert_eq!(miou(&m, &m, 2).unwrap(), 1.0);
    }

    #[test]
    fn four_pixel_case() {
        let truth = [1, 1, 0, 0];
        let pred = [1, 0, 0, 0];
        assert_eq!(miou(&pred, &truth, 2).unwrap(), (0.5 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn complementary_masks_score_zero() {
        let truth = [1, 0, 1, 0];
        let pred = [0, 1, 0, 1];
        assert_eq!(miou(&pred, &truth, 2).unwrap(), 0.0);
    }

    #[test]
    fn prf_worked_example() {
        let mut cm = ConfusionCounts::new(2);
        for _ in 0..3 {
            cm.add(1, 1);
        }
        cm.add(0, 1);
        cm.add(1, 0);
        cm.add(1, 0);
        let s = precision_recall_f1(&cm, 1);
        assert_eq!(s.precision, Some(0.75));
        assert_eq!(s.recall, Some(0.6));
        assert!((s.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn never_predicted_class_has_null_precision() {
        let cm = ConfusionCounts::from_labels(&[0, 0, 0], &[0, 1, 1], 2).unwrap();
        let s = precision_recall_f1(&cm, 1);
        assert_eq!(s.precision, None);
        assert_eq!(s.recall, Some(0.0));
        assert_eq!(s.f1, None);
        assert!(s.flags.contains(&Degenerate::NoPredictions));
    }

    #[test]
    fn density_worked_example() {
        let r = density_errors(&[(0.5, 0.4), (0.2, 0.2)]).unwrap();
        assert!((r.mae.unwrap() - 0.05).abs() < 1e-15);
        assert!((r.rmse.unwrap() - (0.01f64 / 2.0).sqrt()).abs() < 1e-15);
        assert!((r.mean_accuracy.unwrap() - 0.9).abs() < 1e-15);
        let empty = density_errors(&[]).unwrap();
        assert_eq!((empty.n, empty.mae), (0, None));
    }

    #[test]
    fn mean_accuracy_can_go_negative() {
        let r = density_errors(&[(0.1, 0.35)]).unwrap();
        assert!(r.mean_accuracy.unwrap() < 0.0);
    }
}
