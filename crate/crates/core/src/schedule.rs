//! Per-epoch learning-rate schedule: linear warmup, constant hold, cosine
//! decay back to the floor.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub hold_until: usize,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lr_min: 1e-8,
            lr_max: 2e-5,
            warmup_epochs: 75,
            hold_until: 600,
            total_epochs: 750,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero-length hold (warmup_epochs == hold_until) is allowed so that
        // two-epoch smoke runs have a valid schedule.
        if !(0 < self.warmup_epochs && self.warmup_epochs <= self.hold_until && self.hold_until < self.total_epochs) {
            return Err(config_err!(
                "schedule needs 0 < warmup_epochs ({}) <= hold_until ({}) < total_epochs ({})",
                self.warmup_epochs,
                self.hold_until,
                self.total_epochs
            ));
        }
        if !(self.lr_min.is_finite() && self.lr_max.is_finite() && 0.0 <= self.lr_min && self.lr_min < self.lr_max) {
            return Err(config_err!("schedule needs 0 <= lr_min ({}) < lr_max ({})", self.lr_min, self.lr_max));
        }
        Ok(())
    }
}

pub fn lr_at(epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    let c = cfg;
    if epoch > c.total_epochs {
        return Err(config_err!("epoch {epoch} is past the end of the schedule ({})", c.total_epochs));
    }
    let span = c.lr_max - c.lr_min;
    Ok(if epoch < c.warmup_epochs {
        c.lr_min + span * epoch as f64 / c.warmup_epochs as f64
    } else if epoch <= c.hold_until {
        c.lr_max
    } else {
        let phase = (epoch - c.hold_until) as f64 / (c.total_epochs - c.hold_until) as f64;
        c.lr_min + span * (1.0 + (PI * phase).cos()) / 2.0
    })
}
