//! Coarse-grained head: super-class prototypes, the memory queue that
//! turns historical coarse predictions into pseudo-super-labels, and the
//! coarse classification and representation losses.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, Tensor2, Var};
use crate::target::{positive_sets, AnchoredLoss};

pub use crate::target::class_probs as coarse_probs;
pub use crate::target::cls_loss_all as coarse_cls_all;

/// Tolerance on the row sums of probability vectors entering the queue.
pub const QUEUE_SUM_TOL: f64 = 1e-6;

/// Bounded FIFO of `(target label, coarse probability vector)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryQueue {
    capacity: usize,
    num_coarse: usize,
    entries: VecDeque<(usize, Vec<f64>)>,
}

impl MemoryQueue {
    pub fn new(capacity: usize, num_coarse: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            num_coarse,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.entries.iter().map(|(y, p)| (*y, p.as_slice()))
    }

    /// Appends one entry per row, evicting the oldest entries beyond
    /// capacity. The whole batch is validated before anything is stored.
    pub fn push(&mut self, labels: &[usize], probs: &Tensor2) -> Result<()> {
        if labels.len() != probs.rows() || probs.cols() != self.num_coarse {
            return Err(Error::shape(
                "queue_push",
                format!(
                    "{} labels, {}x{} probs, queue width {}",
                    labels.len(),
                    probs.rows(),
                    probs.cols(),
                    self.num_coarse
                ),
            ));
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > QUEUE_SUM_TOL || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::Contract(format!(
                    "queue_push: row {r} is not a probability vector (sum {s})"
                )));
            }
        }
        for (r, &y) in labels.iter().enumerate() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back((y, probs.row(r).to_vec()));
        }
        Ok(())
    }

    /// Stored vectors whose label is `y`, oldest first.
    pub fn entries_for(&self, y: usize) -> Vec<&[f64]> {
        self.entries
            .iter()
            .filter(|(label, _)| *label == y)
            .map(|(_, p)| p.as_slice())
            .collect()
    }

    /// Elementwise mean of the stored vectors labeled `y`, or `None` when
    /// there are none.
    pub fn pseudo_super_label(&self, y: usize) -> Option<Vec<f64>> {
        let mut sum = vec![0.0; self.num_coarse];
        let mut count = 0usize;
        for (label, p) in &self.entries {
            if *label == y {
                count += 1;
                for (s, v) in sum.iter_mut().zip(p) {
                    *s += v;
                }
            }
        }
        if count == 0 {
            return None;
        }
        sum.iter_mut().for_each(|s| *s /= count as f64);
        Some(sum)
    }

    /// Pseudo-labels for a batch. Labels with no stored history fall back
    /// to the corresponding row of `fallback`; the second return value
    /// counts those fallbacks.
    pub fn pseudo_labels(&self, labels: &[usize], fallback: &Tensor2) -> Result<(Tensor2, usize)> {
        if fallback.shape() != (labels.len(), self.num_coarse) {
            return Err(Error::shape(
                "pseudo_labels",
                format!(
                    "fallback {}x{} for {} labels",
                    fallback.rows(),
                    fallback.cols(),
                    labels.len()
                ),
            ));
        }
        let mut out = Tensor2::zeros(labels.len(), self.num_coarse);
        let mut misses = 0;
        for (r, &y) in labels.iter().enumerate() {
            match self.pseudo_super_label(y) {
                Some(p) => out.row_mut(r).copy_from_slice(&p),
                None => {
                    misses += 1;
                    out.row_mut(r).copy_from_slice(fallback.row(r));
                }
            }
        }
        Ok((out, misses))
    }
}

/// Cross-entropy of labeled coarse predictions against fixed
/// pseudo-super-labels.
pub fn coarse_cls_labeled<'t>(pc_l: Var<'t>, pseudo: &Tensor2) -> Result<Var<'t>> {
    let q = pc_l.tape().constant(pseudo.clone());
    crate::target::soft_cross_entropy(pc_l, q)
}

/// Negative mean cosine similarity between same-label embeddings, with no
/// negatives. Anchors without a positive contribute 0.
pub fn coarse_rep_labeled<'t>(z_l: Var<'t>, labels: &[usize]) -> Result<AnchoredLoss<'t>> {
    let (n, _) = z_l.shape();
    if labels.len() != n {
        return Err(Error::shape(
            "coarse_rep_labeled",
            format!("{} labels for {n} embeddings", labels.len()),
        ));
    }
    let gram = z_l.matmul_t(z_l)?;
    let mut weights = Tensor2::zeros(n, n);
    let mut used = 0;
    for (i, pos) in positive_sets(labels).iter().enumerate() {
        if pos.is_empty() {
            continue;
        }
        used += 1;
        for &p in pos {
            weights.set(i, p, -1.0 / (n as f64 * pos.len() as f64));
        }
    }
    Ok(AnchoredLoss {
        loss: gram.weighted_sum(weights)?,
        anchors_used: used,
    })
}

/// Alignment of each embedding with its most probable super-class
/// prototype, weighted by that probability. `pc` supplies both the argmax
/// (ties to the lowest index) and the weights, and receives no gradient.
pub fn coarse_rep_all<'t>(z: Var<'t>, unit_coarse: Var<'t>, pc: &Tensor2) -> Result<Var<'t>> {
    let logits = z.matmul_t(unit_coarse)?;
    let (n, k) = logits.shape();
    if pc.shape() != (n, k) {
        return Err(Error::shape(
            "coarse_rep_all",
            format!("probs {}x{} vs logits {n}x{k}", pc.rows(), pc.cols()),
        ));
    }
    let log_prob = logits.log_softmax_masked(&vec![true; n * k])?;
    let mut weights = Tensor2::zeros(n, k);
    for i in 0..n {
        let best = argmax(pc.row(i));
        weights.set(i, best, -pc.get(i, best) / n as f64);
    }
    log_prob.weighted_sum(weights)
}
