use serde::{Deserialize, Serialize};

/// Learning-rate decay driven by a held-out score (lower is better).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub decay: f64,
    /// Required relative improvement over the best score.
    pub threshold: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// When false the rate stays fixed but the best score is still tracked.
    pub enabled: bool,
    pub best: Option<f64>,
    pub patience_left: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::new(1e-3)
    }
}

impl LrSchedule {
    pub fn new(lr: f64) -> Self {
        LrSchedule { lr, decay: 0.7, threshold: 0.001, patience: 1, min_lr: 1e-5, enabled: true, best: None, patience_left: 1 }
    }

    pub fn fixed(lr: f64) -> Self {
        LrSchedule { enabled: false, ..LrSchedule::new(lr) }
    }

    /// Records one epoch's score and returns the rate for the next epoch.
    pub fn update(&mut self, score: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(b) => score < b * (1.0 - self.threshold),
        };
        if improved {
            self.best = Some(score);
            self.patience_left = self.patience;
        } else {
            self.patience_left = self.patience_left.saturating_sub(1);
            if self.patience_left == 0 {
                if self.enabled {
                    self.lr = (self.lr * self.decay).max(self.min_lr);
                }
                self.patience_left = self.patience;
            }
        }
        self.lr
    }

    /// Forgets the best score, e.g. after the model changed shape.
    pub fn reset_best(&mut self) {
        self.best = None;
        self.patience_left = self.patience;
    }
}
