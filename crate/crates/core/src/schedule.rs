//! Cyclical cosine learning rate indexed by iteration.
//!
//! Each cycle of `cycle_len` iterations starts at `alpha_max`, follows a half
//! cosine and ends on `alpha_min` at its last iteration; the next iteration
//! restarts at `alpha_max`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("iteration {t} outside schedule of {total_iters} iterations")]
    OutOfRange { t: usize, total_iters: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleConfig {
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Iterations per cycle.
    pub cycle_len: usize,
    pub total_iters: usize,
}

impl CycleConfig {
    pub fn new(
        alpha_min: f64,
        alpha_max: f64,
        cycle_len: usize,
        total_iters: usize,
    ) -> Result<Self, ScheduleError> {
        let cfg = Self {
            alpha_min,
            alpha_max,
            cycle_len,
            total_iters,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.alpha_min.is_finite() && self.alpha_max.is_finite()) {
            return Err(ScheduleError::Invalid("learning rates must be finite".into()));
        }
        if !(0.0 < self.alpha_min && self.alpha_min < self.alpha_max) {
            return Err(ScheduleError::Invalid(format!(
                "need 0 < alpha_min < alpha_max, got alpha_min={} alpha_max={}",
                self.alpha_min, self.alpha_max
            )));
        }
        if self.cycle_len < 2 {
            return Err(ScheduleError::Invalid(format!(
                "cycle_len must be >= 2, got {}",
                self.cycle_len
            )));
        }
        if self.total_iters < self.cycle_len {
            return Err(ScheduleError::Invalid(format!(
                "total_iters {} shorter than one cycle of {}",
                self.total_iters, self.cycle_len
            )));
        }
        Ok(())
    }

    /// Cycles shorter than 4 iterations make the midpoint collide with a
    /// cycle end.
    pub fn is_degenerate(&self) -> bool {
        self.cycle_len < 4
    }

    pub fn completed_cycles(&self) -> usize {
        self.total_iters / self.cycle_len
    }

    pub fn lr_at(&self, t: usize) -> Result<f64, ScheduleError> {
        if t >= self.total_iters {
            return Err(ScheduleError::OutOfRange {
                t,
                total_iters: self.total_iters,
            });
        }
        let phase = t % self.cycle_len;
        // Endpoints are pinned so cycle starts and ends hit the bounds bit-exactly.
        if phase == 0 {
            return Ok(self.alpha_max);
        }
        if phase == self.cycle_len - 1 {
            return Ok(self.alpha_min);
        }
        let u = phase as f64 / (self.cycle_len - 1) as f64;
        let lr = self.alpha_min
            + 0.5 * (self.alpha_max - self.alpha_min) * (1.0 + (std::f64::consts::PI * u).cos());
        Ok(lr.clamp(self.alpha_min, self.alpha_max))
    }

    /// Last iteration of every completed cycle.
    pub fn cycle_minima(&self) -> Vec<usize> {
        (1..=self.completed_cycles())
            .map(|c| c * self.cycle_len - 1)
            .collect()
    }

    /// First iteration of every completed cycle whose learning rate is at or
    /// below `(alpha_max + alpha_min) / 2`.
    ///
    /// The cosine term is non-positive exactly when `phase / (cycle_len - 1)
    /// >= 1/2`, so the crossing is located in integer arithmetic. With
    /// `cycle_len == 2` the midpoint is the cycle minimum.
    pub fn cycle_midpoints(&self) -> Vec<usize> {
        let phase = (self.cycle_len - 1).div_ceil(2);
        (0..self.completed_cycles())
            .map(|c| c * self.cycle_len + phase)
            .collect()
    }

    /// Midpoint of the learning-rate range.
    pub fn mid_lr(&self) -> f64 {
        0.5 * (self.alpha_max + self.alpha_min)
    }

    /// Upper bound on the learning-rate change between two consecutive
    /// iterations of one cycle.
    pub fn max_step(&self) -> f64 {
        0.5 * (self.alpha_max - self.alpha_min) * std::f64::consts::PI / (self.cycle_len - 1) as f64
    }
}
