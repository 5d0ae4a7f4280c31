//! SGD with momentum and weight decay, a reduce-on-plateau scheduler and an
//! early stopper.

use crate::error::{Error, Result};

/// Minimum decrease of the monitored metric that counts as an improvement.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

/// Default learning-rate floor for [`PlateauScheduler`].
pub const DEFAULT_MIN_LR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    /// `param_lens` fixes the shape of every parameter buffer, in the order
    /// they will be passed to [`SgdState::step`].
    pub fn new(
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        param_lens: &[usize],
    ) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {learning_rate} must be positive"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} not in [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {weight_decay} must be non-negative"
            )));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// `v ← momentum·v + (g + wd·θ)`, `θ ← θ − lr·v`, per buffer.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::dim(
                "sgd_step",
                format!("{} velocity buffers", self.velocity.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != v.len() || g.len() != v.len() {
                return Err(Error::dim(
                    "sgd_step",
                    format!("buffer of {}", v.len()),
                    format!("param {} / grad {}", p.len(), g.len()),
                ));
            }
            for ((pi, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + (gi + self.weight_decay * *pi);
                *pi -= self.learning_rate * *vi;
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored metric has
/// failed to improve for more than `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    lr: f64,
    best_metric: f64,
    epochs_since_improvement: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize, min_lr: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau factor {factor} not in (0, 1)"
            )));
        }
        if !(min_lr >= 0.0) {
            return Err(Error::Config(format!(
                "min_lr {min_lr} must be non-negative"
            )));
        }
        Ok(PlateauScheduler {
            factor,
            patience,
            min_lr,
            lr: initial_lr,
            best_metric: f64::INFINITY,
            epochs_since_improvement: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn best_metric(&self) -> f64 {
        self.best_metric
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.epochs_since_improvement
    }

    /// Feeds one epoch's validation metric and returns the learning rate to
    /// use from now on.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best_metric - IMPROVEMENT_THRESHOLD {
            self.best_metric = metric;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        if self.epochs_since_improvement > self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr).min(self.lr);
            self.epochs_since_improvement = 0;
        }
        self.lr
    }
}

#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    best_metric: f64,
    epochs_since_improvement: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best_metric: f64::INFINITY,
            epochs_since_improvement: 0,
        }
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.epochs_since_improvement
    }

    /// Returns `true` when training should stop.
    pub fn step(&mut self, metric: f64) -> bool {
        if metric < self.best_metric - IMPROVEMENT_THRESHOLD {
            self.best_metric = metric;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        self.epochs_since_improvement > self.patience
    }
}
