//! Cyclic cosine learning-rate schedule with warm restarts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleSchedule {
    pub total_epochs: usize,
    pub cycles: usize,
    /// Snapshots taken at the end of each cycle.
    pub checkpoints_per_cycle: usize,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl Default for CycleSchedule {
    fn default() -> Self {
        Self {
            total_epochs: 600,
            cycles: 3,
            checkpoints_per_cycle: 10,
            lr_max: 0.01,
            lr_min: 1e-6,
        }
    }
}

impl CycleSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 || self.total_epochs == 0 || self.total_epochs % self.cycles != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} epochs cannot be split into {} equal cycles",
                self.total_epochs, self.cycles
            )));
        }
        if self.checkpoints_per_cycle == 0 || self.checkpoints_per_cycle > self.epochs_per_cycle() {
            return Err(Error::InvalidArgument(format!(
                "checkpoints_per_cycle must be in 1..={}, got {}",
                self.epochs_per_cycle(),
                self.checkpoints_per_cycle
            )));
        }
        if !(self.lr_min >= 0.0 && self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        Ok(())
    }

    pub fn epochs_per_cycle(&self) -> usize {
        self.total_epochs / self.cycles.max(1)
    }

    pub fn total_checkpoints(&self) -> usize {
        self.cycles * self.checkpoints_per_cycle
    }

    /// Learning rate for a 0-based epoch: cosine from `lr_max` at the start
    /// of each cycle down to `lr_min` at its last epoch.
    pub fn lr(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside 0..{}",
                self.total_epochs
            )));
        }
        let ed = self.epochs_per_cycle();
        if ed <= 1 {
            return Ok(self.lr_max);
        }
        let e = (epoch % ed) as f64;
        let cos = (std::f64::consts::PI * e / (ed - 1) as f64).cos();
        Ok(self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + cos))
    }

    /// `(cycle, slot)` when a snapshot is due after `epoch`; slots count
    /// from 0 within the cycle.
    pub fn checkpoint_slot(&self, epoch: usize) -> Option<(usize, usize)> {
        let ed = self.epochs_per_cycle();
        let within = epoch % ed;
        let first = ed - self.checkpoints_per_cycle;
        (epoch < self.total_epochs && within >= first).then(|| (epoch / ed, within - first))
    }
}
