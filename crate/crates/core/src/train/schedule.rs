//! Warmup-then-decay learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub warmup_start: f64,
    pub peak: f64,
    pub warmup_steps: u64,
    pub epoch_decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup_start: 1e-4,
            peak: 1e-2,
            warmup_steps: 5000,
            epoch_decay: 0.99,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_start < self.peak) || !(self.warmup_start >= 0.0) {
            return Err(Error::Config(format!(
                "warmup_start {} must be in [0, peak {})",
                self.warmup_start, self.peak
            )));
        }
        if !(self.epoch_decay > 0.0 && self.epoch_decay <= 1.0) {
            return Err(Error::Config(format!(
                "epoch_decay {} must be in (0, 1]",
                self.epoch_decay
            )));
        }
        Ok(())
    }

    /// Index of the first epoch that starts after warmup has finished.
    pub fn first_decay_epoch(&self, steps_per_epoch: u64) -> u64 {
        self.warmup_steps.div_ceil(steps_per_epoch.max(1))
    }
}

/// Linear warmup `warmup_start → peak` over `warmup_steps`, then
/// `peak · epoch_decay^epochs_since_warmup`.
///
/// The decay is applied one multiplication per epoch so consecutive epochs
/// differ by exactly one factor of `epoch_decay`.
pub fn lr_at(step: u64, epochs_since_warmup: u64, s: &LrSchedule) -> f64 {
    if step < s.warmup_steps {
        let frac = step as f64 / s.warmup_steps as f64;
        return s.warmup_start + (s.peak - s.warmup_start) * frac;
    }
    let mut lr = s.peak;
    for _ in 0..epochs_since_warmup {
        lr *= s.epoch_decay;
    }
    lr
}

/// Learning rate for a global step given the epoch length.
pub fn lr_for_step(step: u64, steps_per_epoch: u64, s: &LrSchedule) -> f64 {
    let epoch = step / steps_per_epoch.max(1);
    let since = if step < s.warmup_steps {
        0
    } else {
        epoch.saturating_sub(s.first_decay_epoch(steps_per_epoch))
    };
    lr_at(step, since, s)
}
