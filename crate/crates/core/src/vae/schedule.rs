use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Capacity-controlled KL penalty: `gamma * |KL - C|` with `C` ramping
/// linearly from `c_start` to `c_end` over training progress.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentangleSchedule {
    pub gamma: f64,
    pub c_start: f64,
    pub c_end: f64,
    progress: f64,
}

impl DisentangleSchedule {
    pub fn new(gamma: f64, c_start: f64, c_end: f64) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(Error::config(format!(
                "gamma must be non-negative, got {gamma}"
            )));
        }
        if !(c_start >= 0.0 && c_end >= 0.0) {
            return Err(Error::config("capacity endpoints must be non-negative"));
        }
        Ok(Self {
            gamma,
            c_start,
            c_end,
            progress: 0.0,
        })
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn set_progress(&mut self, progress: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&progress) {
            return Err(Error::contract(format!(
                "progress must lie in [0, 1], got {progress}"
            )));
        }
        self.progress = progress;
        Ok(())
    }

    pub fn with_progress(mut self, progress: f64) -> Result<Self> {
        self.set_progress(progress)?;
        Ok(self)
    }

    /// Current target capacity `C`, in nats.
    pub fn capacity(&self) -> f64 {
        self.c_start + (self.c_end - self.c_start) * self.progress
    }
}

/// KL weight warm-up: linear from `start` to `end` over the first
/// `ramp_fraction` of a task, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub ramp_fraction: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            start: 0.01,
            end: 1.0,
            ramp_fraction: 0.5,
        }
    }
}

impl BetaSchedule {
    /// A schedule pinned at `beta* = 1`.
    pub fn constant() -> Self {
        Self {
            start: 1.0,
            end: 1.0,
            ramp_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start >= 0.0 && self.end >= 0.0) {
            return Err(Error::config("beta* endpoints must be non-negative"));
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return Err(Error::config("beta* ramp fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn value(&self, progress: f64) -> f64 {
        let t = (progress / self.ramp_fraction).clamp(0.0, 1.0);
        self.start + (self.end - self.start) * t
    }
}
