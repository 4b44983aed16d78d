//! Reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

/// A loss counts as improved when it beats the best so far by this fraction.
pub const PLATEAU_REL_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_MIN_LR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64, min_lr: f64) -> Self {
        PlateauScheduler { lr, patience: patience.max(1), factor, min_lr, best: None, bad_epochs: 0 }
    }

    /// Feeds one epoch's monitored loss and returns the learning rate for
    /// the next epoch. The stagnation counter restarts after every drop.
    pub fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(best) if !(loss < best * (1.0 - PLATEAU_REL_THRESHOLD)) => self.bad_epochs += 1,
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        if self.bad_epochs >= self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr).min(self.lr);
            self.bad_epochs = 0;
        }
        self.lr
    }
}

/// Learning rate after replaying `tail` through a fresh scheduler that
/// starts at `current_lr`, with the default floor.
pub fn lr_plateau_step(tail: &[f64], current_lr: f64, patience: usize, factor: f64) -> f64 {
    let mut s = PlateauScheduler::new(current_lr, patience, factor, DEFAULT_MIN_LR);
    for &loss in tail {
        s.observe(loss);
    }
    s.lr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_losses_drop_after_patience() {
        assert!((lr_plateau_step(&[1.0; 4], 1e-3, 3, 0.1) - 1e-4).abs() < 1e-15);
        assert_eq!(lr_plateau_step(&[1.0; 3], 1e-3, 3, 0.1), 1e-3);
    }

    #[test]
    fn improving_losses_keep_lr() {
        assert_eq!(lr_plateau_step(&[1.0, 0.9, 0.8, 0.7, 0.6, 0.5], 1e-3, 3, 0.1), 1e-3);
    }

    #[test]
    fn tiny_improvements_count_as_stagnant() {
        let tail = [1.0, 1.0 - 5e-5, 1.0 - 9e-5, 1.0 - 9.9e-5];
        assert!(lr_plateau_step(&tail, 1e-3, 3, 0.1) < 1e-3);
    }

    #[test]
    fn repeated_plateaus_hit_the_floor() {
        assert_eq!(lr_plateau_step(&[2.0; 100], 1e-3, 3, 0.1), DEFAULT_MIN_LR);
    }

    #[test]
    fn scheduler_drop_epochs() {
        let mut s = PlateauScheduler::new(1e-3, 3, 0.1, DEFAULT_MIN_LR);
        let lrs: Vec<f64> = (0..8).map(|_| s.observe(1.0)).collect();
        assert_eq!(lrs[..3], [1e-3; 3]);
        assert!((lrs[3] - 1e-4).abs() < 1e-15);
        assert!((lrs[6] - 1e-5).abs() < 1e-16);
    }
}
