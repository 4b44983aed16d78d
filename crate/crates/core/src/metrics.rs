//! Overlap and accuracy metrics from thresholded probability maps.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Pixel counts of `probs ≥ threshold` against a binary mask.
pub fn confusion(probs: &[f32], mask: &[f32], threshold: f64) -> Result<ConfusionCounts> {
    if probs.len() != mask.len() {
        return Err(Error::Structural(format!(
            "prediction has {} pixels but mask has {}",
            probs.len(),
            mask.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probs.iter().zip(mask) {
        match (p as f64 >= threshold, y >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub miou: f64,
    pub accuracy: f64,
    pub n_images: usize,
}

/// `num / den`, or 1 when both the denominator and the reference set are
/// empty, or 0 when only the denominator is.
fn ratio(num: u64, den: u64, reference_empty: bool) -> f64 {
    if den > 0 {
        num as f64 / den as f64
    } else if reference_empty {
        1.0
    } else {
        0.0
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> MetricsReport {
    let no_fg_truth = c.tp + c.fn_ == 0;
    let no_bg_truth = c.tn + c.fp == 0;
    MetricsReport {
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, no_fg_truth),
        precision: ratio(c.tp, c.tp + c.fp, c.fn_ == 0),
        recall: ratio(c.tp, c.tp + c.fn_, c.fp == 0),
        miou: 0.5
            * (ratio(c.tp, c.tp + c.fp + c.fn_, no_fg_truth) + ratio(c.tn, c.tn + c.fp + c.fn_, no_bg_truth)),
        accuracy: ratio(c.tp + c.tn, c.total(), true),
        n_images: 1,
    }
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "dice,precision,recall,miou,accuracy,n_images";

    /// Unweighted mean of per-image reports, summed in the given order.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::Config("cannot average metrics over zero images".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            dice: avg(|r| r.dice),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            miou: avg(|r| r.miou),
            accuracy: avg(|r| r.accuracy),
            n_images: reports.len(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            self.dice, self.precision, self.recall, self.miou, self.accuracy, self.n_images
        )
    }

    pub fn values(&self) -> [f64; 5] {
        [self.dice, self.precision, self.recall, self.miou, self.accuracy]
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dice {:.4}  precision {:.4}  recall {:.4}  miou {:.4}  accuracy {:.4}  (n={})",
            self.dice, self.precision, self.recall, self.miou, self.accuracy, self.n_images
        )
    }
}

/// Metrics of one image.
pub fn image_metrics(probs: &[f32], mask: &[f32]) -> Result<MetricsReport> {
    Ok(compute_metrics(&confusion(probs, mask, DEFAULT_THRESHOLD)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_example() {
        let c = confusion(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0], 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 2 });
        let m = compute_metrics(&c);
        assert!((m.dice - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.accuracy, 0.75);
        assert!((m.miou - 0.5 * (0.5 + 2.0 / 3.0)).abs() < 1e-12);
        assert!((m.miou - 0.5833).abs() < 1e-4);
    }

    #[test]
    fn threshold_is_inclusive() {
        let c = confusion(&[0.5; 4], &[0.0; 4], 0.5).unwrap();
        assert_eq!(c.fp, 4);
    }

    #[test]
    fn empty_and_saturated_cases() {
        let empty = compute_metrics(&confusion(&[0.0; 9], &[0.0; 9], 0.5).unwrap());
        assert_eq!(empty.values(), [1.0; 5]);
        let full = compute_metrics(&confusion(&[1.0; 9], &[1.0; 9], 0.5).unwrap());
        assert_eq!(full.values(), [1.0; 5]);
    }

    #[test]
    fn missed_lesion_scores_zero_overlap() {
        let m = compute_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 5 });
        assert_eq!((m.dice, m.recall), (0.0, 0.0));
        assert_eq!(m.precision, 0.0);
    }

    #[test]
    fn mean_and_csv() {
        let a = MetricsReport { dice: 1.0, precision: 1.0, recall: 1.0, miou: 1.0, accuracy: 1.0, n_images: 1 };
        let b = MetricsReport { dice: 0.5, precision: 0.25, recall: 0.0, miou: 0.5, accuracy: 0.5, n_images: 1 };
        let m = MetricsReport::mean(&[a, b]).unwrap();
        assert_eq!(m.csv_row(), "0.7500,0.6250,0.5000,0.7500,0.7500,2");
        assert!(MetricsReport::mean(&[]).is_err());
    }
}
