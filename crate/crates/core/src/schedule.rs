//! Cosine warm-up ramps that phase in the coarse and distillation losses,
//! and assembly of the total objective.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Var;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampSchedule {
    pub start: u32,
    pub end: u32,
    pub lambda_final: f64,
}

impl RampSchedule {
    pub fn new(start: u32, end: u32, lambda_final: f64) -> Result<Self> {
        let s = Self {
            start,
            end,
            lambda_final,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.start && self.start < self.end) {
            return Err(Error::Config(format!(
                "ramp needs 1 <= start < end, got start={} end={}",
                self.start, self.end
            )));
        }
        if !(self.lambda_final >= 0.0 && self.lambda_final.is_finite()) {
            return Err(Error::Config(format!(
                "ramp lambda must be finite and non-negative, got {}",
                self.lambda_final
            )));
        }
        Ok(())
    }

    /// 0 before `start`, a half-cosine rise on `[start, end)`, then
    /// `lambda_final`. Epochs count from 1.
    pub fn weight(&self, epoch: u32) -> f64 {
        if epoch < self.start {
            0.0
        } else if epoch >= self.end {
            self.lambda_final
        } else {
            let frac = f64::from(epoch - self.start) / f64::from(self.end - self.start);
            self.lambda_final / 2.0 * (1.0 - (frac * PI).cos())
        }
    }
}

/// Ramp weights at one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampWeights {
    pub coarse: f64,
    pub distill: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub coarse: RampSchedule,
    pub distill: RampSchedule,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            coarse: RampSchedule {
                start: 30,
                end: 60,
                lambda_final: 0.5,
            },
            distill: RampSchedule {
                start: 60,
                end: 90,
                lambda_final: 0.5,
            },
        }
    }
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        self.coarse.validate()?;
        self.distill.validate()
    }

    pub fn weights(&self, epoch: u32) -> RampWeights {
        RampWeights {
            coarse: self.coarse.weight(epoch),
            distill: self.distill.weight(epoch),
        }
    }
}

/// `L_target + f_c L_coarse + f_t2c L_t2c`. Terms whose weight is exactly 0
/// are left out of the graph, so they contribute neither value nor
/// gradient.
pub fn total_loss<'t>(
    target: Var<'t>,
    coarse: Option<Var<'t>>,
    distill: Option<Var<'t>>,
    weights: RampWeights,
) -> Result<Var<'t>> {
    let mut total = target;
    if let Some(c) = coarse.filter(|_| weights.coarse != 0.0) {
        total = total.add(c.scale(weights.coarse))?;
    }
    if let Some(d) = distill.filter(|_| weights.distill != 0.0) {
        total = total.add(d.scale(weights.distill))?;
    }
    Ok(total)
}

/// Scalar form of [`total_loss`].
pub fn total_scalar(target: f64, coarse: f64, distill: f64, weights: RampWeights) -> f64 {
    let mut total = target;
    if weights.coarse != 0.0 {
        total += weights.coarse * coarse;
    }
    if weights.distill != 0.0 {
        total += weights.distill * distill;
    }
    total
}
