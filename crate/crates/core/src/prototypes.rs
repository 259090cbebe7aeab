use serde::{Deserialize, Serialize};

use crate::data::rng_for;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor2, Var};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Target,
    Coarse,
}

/// Learnable class prototypes at one granularity, one unit row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub prototypes: Tensor2,
    pub granularity: Granularity,
}

impl PrototypeBank {
    /// Random unit-norm prototypes.
    pub fn init(num: usize, dim: usize, granularity: Granularity, seed: u64, stream: u64) -> Result<Self> {
        if num < 2 {
            return Err(Error::Config(format!(
                "{granularity:?} bank needs at least 2 prototypes, got {num}"
            )));
        }
        let mut rng = rng_for(seed, stream);
        let data = (0..num * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let prototypes = Tensor2::new(num, dim, data)?.l2_normalize_rows()?;
        Ok(Self {
            prototypes,
            granularity,
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn renormalize(&mut self) -> Result<()> {
        self.prototypes = self.prototypes.l2_normalize_rows()?;
        Ok(())
    }

    /// Records the raw prototypes as a parameter and returns
    /// `(raw, unit_rows)`; gradients reach the raw leaf through the
    /// normalization.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> Result<(Var<'t>, Var<'t>)> {
        let raw = tape.param(self.prototypes.clone());
        let unit = raw.l2_normalize_rows()?;
        Ok((raw, unit))
    }
}
