//! Adaptive volume limits and penalty scaling.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub global_target: f64,
    pub global_current: f64,
    pub beso_target: f64,
    pub beso_current: f64,
    pub every: usize,
    pub global_step: f64,
    pub beso_step: f64,
    /// Penalty weight `k`, and the ratio of `k * f_div` to the compliance
    /// term that it is rescaled towards.
    pub k: f64,
    pub penalty_level: f64,
}

impl Schedules {
    /// Starts at `V*_Global = 0.95` and `V*_BESO = sqrt(target)`.
    pub fn new(global_target: f64, beso_target: f64, penalty_level: f64) -> Self {
        Self {
            global_target,
            global_current: 0.95f64.max(global_target),
            beso_target,
            beso_current: global_target.sqrt().max(beso_target),
            every: 10,
            global_step: 0.025,
            beso_step: 0.005,
            k: 0.0,
            penalty_level,
        }
    }

    pub fn global_reached(&self) -> bool {
        self.global_current <= self.global_target
    }

    /// Lowers the limits on every `every`-th iteration.
    pub fn adaptive_volume_update(&mut self, i: usize, v_global: f64, v_beso: f64) {
        if i == 0 || !i.is_multiple_of(self.every) {
            return;
        }
        if self.global_current > self.global_target {
            self.global_current =
                (v_global.min(self.global_current) - self.global_step).max(self.global_target);
        }
        if v_beso <= self.beso_current && self.beso_current > self.beso_target {
            self.beso_current = (self.beso_current - self.beso_step).max(self.beso_target);
        }
    }

    /// Picks `k` so that `k * f_div = level * objective`.
    pub fn rescale_penalty(&mut self, f_div: f64, objective: f64) {
        self.k = if self.penalty_level > 0.0 {
            self.penalty_level * objective / f_div.max(1e-2)
        } else {
            0.0
        };
    }
}
