use serde::{Deserialize, Serialize};

use super::adamw::AdamWConfig;
use crate::error::{Error, Result};

/// Per-sample weight on the bridge x0-regression loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeight {
    /// `1 / c_out(t)^2`: a unit-weight regression on the raw network output.
    InvCout2,
    /// `1 / c_t`, capped at `1 / c_{t_min}`.
    InvCt,
    Unit,
}

/// Distribution of training times.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeDist {
    /// Bridge: uniform on `[t_min, T]`. Refiner: uniform on `{1..T_refine}`.
    Uniform,
    /// Refiner only: uniform on `{1..t_prior}`, the steps sampling visits.
    UpToPrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss_weight: LossWeight,
    pub time_dist: TimeDist,
}

impl TrainConfig {
    pub fn bridge_default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            loss_weight: LossWeight::InvCout2,
            time_dist: TimeDist::Uniform,
        }
    }

    pub fn refiner_default() -> Self {
        Self {
            lr: 5e-5,
            loss_weight: LossWeight::Unit,
            ..Self::bridge_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite())
            || self.batch_size == 0
            || !(self.weight_decay >= 0.0)
        {
            return Err(Error::invalid(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}
