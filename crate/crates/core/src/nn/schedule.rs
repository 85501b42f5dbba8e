use serde::{Deserialize, Serialize};

use crate::error::{BmaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "rate", rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Half-cosine decay from `r0` at batch 0 to 0 at batch `total_batches`.
    Decaying,
    Constant(f64),
}

/// Learning-rate schedule position, advanced once per mini-batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub r0: f64,
    pub total_batches: u64,
    pub batch: u64,
    pub mode: ScheduleMode,
}

impl ScheduleState {
    pub fn decaying(r0: f64, total_batches: u64) -> Self {
        Self {
            r0,
            total_batches,
            batch: 0,
            mode: ScheduleMode::Decaying,
        }
    }

    pub fn constant(rate: f64) -> Self {
        Self {
            r0: rate,
            total_batches: 0,
            batch: 0,
            mode: ScheduleMode::Constant(rate),
        }
    }

    pub fn rate(&self) -> Result<f64> {
        lr_at(self)
    }

    pub fn tick(&mut self) {
        self.batch += 1;
    }

    /// Rewinds to batch 0, as at the start of a new cycle.
    pub fn restart(&mut self) {
        self.batch = 0;
    }
}

/// Learning rate at the schedule's current batch:
/// `r_b = (r0 / 2) cos(pi b / B) + r0 / 2` while decaying, or the fixed rate.
pub fn lr_at(s: &ScheduleState) -> Result<f64> {
    match s.mode {
        ScheduleMode::Constant(rate) => Ok(rate),
        ScheduleMode::Decaying => {
            if s.batch > s.total_batches {
                return Err(BmaError::Contract(format!(
                    "batch counter {} past schedule length {}",
                    s.batch, s.total_batches
                )));
            }
            if s.total_batches == 0 {
                return Ok(s.r0);
            }
            let phase = std::f64::consts::PI * s.batch as f64 / s.total_batches as f64;
            // Clamp the endpoint where cos(pi) rounds to slightly above -1.
            Ok((0.5 * s.r0 * phase.cos() + 0.5 * s.r0).clamp(0.0, s.r0))
        }
    }
}
