//! Cross-hierarchy distillation: a learnable target-to-coarse relation
//! matrix turns target prototypes into inferred super-class prototypes,
//! and predictions against those are pulled towards the coarse head's.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::rng_for;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor2, Var};
use crate::target::{mean_neg_entropy, soft_cross_entropy};

pub use crate::target::class_probs as distill_probs;

/// Row-softmax parameterized affinity between super-classes (rows) and
/// target classes (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationMatrix {
    pub logits: Tensor2,
}

impl RelationMatrix {
    pub fn zeros(num_coarse: usize, num_target: usize) -> Self {
        Self {
            logits: Tensor2::zeros(num_coarse, num_target),
        }
    }

    pub fn random(num_coarse: usize, num_target: usize, scale: f64, seed: u64, stream: u64) -> Self {
        let mut rng = rng_for(seed, stream);
        let normal = Normal::new(0.0, scale.max(0.0)).expect("non-negative scale");
        let data = (0..num_coarse * num_target)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self {
            logits: Tensor2::new(num_coarse, num_target, data).expect("sized by construction"),
        }
    }

    pub fn num_coarse(&self) -> usize {
        self.logits.rows()
    }

    pub fn num_target(&self) -> usize {
        self.logits.cols()
    }

    /// Row-stochastic affinity.
    pub fn affinity(&self) -> Tensor2 {
        self.logits.softmax_rows()
    }

    /// For each target class, the super-class with the largest affinity.
    pub fn parent_estimate(&self) -> Vec<usize> {
        let a = self.affinity().transpose();
        a.argmax_rows()
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.param(self.logits.clone())
    }

    pub fn affinity_csv(&self) -> String {
        let a = self.affinity();
        let mut out = String::from("super");
        for j in 0..a.cols() {
            let _ = write!(out, ",class{j}");
        }
        out.push('\n');
        for r in 0..a.rows() {
            let _ = write!(out, "{r}");
            for v in a.row(r) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save_affinity_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.affinity_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `normalize_rows(softmax_rows(logits) · C)`: each inferred prototype is a
/// convex combination of target prototypes, scaled back to unit norm.
pub fn inferred_prototypes<'t>(relation_logits: Var<'t>, unit_target: Var<'t>) -> Result<Var<'t>> {
    let (_, k) = relation_logits.shape();
    let (kt, _) = unit_target.shape();
    if k != kt {
        return Err(Error::shape(
            "inferred_prototypes",
            format!("relation has {k} target columns, bank has {kt} prototypes"),
        ));
    }
    relation_logits.softmax_rows().matmul(unit_target)?.l2_normalize_rows()
}

/// Cross-entropy from the coarse head's predictions to the inferred ones,
/// plus the negative entropy of the mean inferred prediction.
///
/// The coarse predictions act as a fixed teacher unless `symmetric` is set.
pub fn distill_loss<'t>(pc: Var<'t>, pt2c: Var<'t>, symmetric: bool) -> Result<Var<'t>> {
    let teacher = if symmetric { pc } else { pc.detach() };
    soft_cross_entropy(pt2c, teacher)?.add(mean_neg_entropy(pt2c)?)
}
