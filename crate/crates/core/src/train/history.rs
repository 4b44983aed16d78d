//! Per-epoch training records and their CSV form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub wb: f64,
    pub kl_benign: f64,
    pub kl_malignant: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub val: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,total,wb,kl_benign,kl_malignant,lr,dice,miou";

    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(last) = self.epochs.last() {
            if record.epoch <= last.epoch || record.lr > last.lr {
                return Err(Error::Validation(format!(
                    "epoch {} (lr {}) cannot follow epoch {} (lr {})",
                    record.epoch, record.lr, last.epoch, last.lr
                )));
            }
        }
        self.epochs.push(record);
        Ok(())
    }

    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total).collect()
    }

    pub fn lrs(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Validation columns are empty when no validation set was given.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let (dice, miou) = match &e.val {
                Some(m) => (m.dice.to_string(), m.miou.to_string()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch, e.total, e.wb, e.kl_benign, e.kl_malignant, e.lr, dice, miou
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, lr: f64) -> EpochRecord {
        EpochRecord { epoch, total: 1.5, wb: 1.0, kl_benign: 0.25, kl_malignant: 0.0, lr, val: None }
    }

    #[test]
    fn csv_layout() {
        let mut h = TrainHistory::default();
        h.push(rec(1, 1e-3)).unwrap();
        let mut second = rec(2, 1e-4);
        second.val = Some(MetricsReport { dice: 0.5, miou: 0.25, ..MetricsReport::default() });
        h.push(second).unwrap();
        let csv = h.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], TrainHistory::CSV_HEADER);
        assert_eq!(lines[1], "1,1.5,1,0.25,0,0.001,,");
        assert_eq!(lines[2], "2,1.5,1,0.25,0,0.0001,0.5,0.25");
    }

    #[test]
    fn rejects_out_of_order_epochs_and_rising_lr() {
        let mut h = TrainHistory::default();
        h.push(rec(1, 1e-4)).unwrap();
        assert!(h.push(rec(1, 1e-4)).is_err());
        assert!(h.push(rec(2, 1e-3)).is_err());
    }

    #[test]
    fn moving_average() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
