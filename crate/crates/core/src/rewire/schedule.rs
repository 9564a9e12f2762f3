use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine-decayed drop fraction: `f0` at epoch 1, zero from `end_epoch` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewireSchedule {
    pub initial_fraction: f64,
    pub end_epoch: usize,
    pub at_epoch_start: bool,
}

impl Default for RewireSchedule {
    fn default() -> Self {
        Self {
            initial_fraction: 0.10,
            end_epoch: 100,
            at_epoch_start: true,
        }
    }
}

impl RewireSchedule {
    /// `initial_fraction` may be 0, which disables rewiring (static sparse training).
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.initial_fraction) {
            return Err(Error::Config(format!(
                "initial drop fraction must lie in [0, 1), got {}",
                self.initial_fraction
            )));
        }
        if self.end_epoch < 2 {
            return Err(Error::Config(format!(
                "rewire end epoch must be at least 2, got {}",
                self.end_epoch
            )));
        }
        Ok(())
    }
}

/// `f(e) = f0/2 * (1 + cos(pi * (e - 1) / (end - 1)))` on `[1, end]`, zero after.
pub fn drop_fraction(epoch: usize, sched: &RewireSchedule) -> Result<f64> {
    if epoch < 1 {
        return Err(Error::Contract(
            "drop fraction is defined from epoch 1; epoch 0 is warmup".into(),
        ));
    }
    if epoch >= sched.end_epoch {
        return Ok(0.0);
    }
    if epoch == 1 {
        return Ok(sched.initial_fraction);
    }
    let t = (epoch - 1) as f64 / (sched.end_epoch - 1) as f64;
    Ok(sched.initial_fraction / 2.0 * (1.0 + (PI * t).cos()))
}
