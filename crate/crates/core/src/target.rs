//! Target-grained head: prototype classifier, supervised and
//! self-supervised contrastive losses, and the classification losses on
//! labeled and on all instances.
//!
//! All functions take embeddings `Z` with unit rows and build their result
//! on the tape of their inputs. Targets that must not receive gradient
//! (one-hot labels, augmented-view predictions) are passed as plain
//! tensors and enter the graph as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tensor2, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau_sup: f64,
    pub tau_self: f64,
    /// Weight of the labeled-only terms against the all-instance terms.
    pub lambda_bal: f64,
    /// Use the unaugmented-only denominator in the self-supervised loss.
    pub eq2_literal: bool,
    /// Optional temperature dividing cosine scores before the prototype
    /// softmax. `None` means the plain softmax over cosines.
    pub proto_temperature: Option<f64>,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau_sup: 0.07,
            tau_self: 0.5,
            lambda_bal: 0.35,
            eq2_literal: false,
            proto_temperature: None,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_sup > 0.0 && self.tau_self > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_bal) {
            return Err(Error::Config(format!(
                "lambda_bal must lie in [0, 1], got {}",
                self.lambda_bal
            )));
        }
        if let Some(t) = self.proto_temperature {
            if !(t > 0.0) {
                return Err(Error::Config("proto_temperature must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Contrastive loss together with how many anchors had a positive.
#[derive(Debug, Clone, Copy)]
pub struct AnchoredLoss<'t> {
    pub loss: Var<'t>,
    pub anchors_used: usize,
}

impl AnchoredLoss<'_> {
    /// True when no anchor had a positive and the loss is identically 0.
    pub fn degenerate(&self) -> bool {
        self.anchors_used == 0
    }
}

/// `softmax(Z · Cᵀ)` for unit-row `Z` and prototypes `C`.
pub fn class_probs<'t>(z: Var<'t>, unit_protos: Var<'t>) -> Result<Var<'t>> {
    class_probs_with(z, unit_protos, None)
}

pub fn class_probs_with<'t>(
    z: Var<'t>,
    unit_protos: Var<'t>,
    temperature: Option<f64>,
) -> Result<Var<'t>> {
    let (_, d) = z.shape();
    let (_, pd) = unit_protos.shape();
    if d != pd {
        return Err(Error::shape(
            "class_probs",
            format!("embedding dim {d} vs prototype dim {pd}"),
        ));
    }
    let sims = z.matmul_t(unit_protos)?;
    let logits = match temperature {
        Some(t) => sims.scale(1.0 / t),
        None => sims,
    };
    Ok(logits.softmax_rows())
}

/// For each anchor, the indices of the other instances sharing its label.
pub(crate) fn positive_sets(labels: &[usize]) -> Vec<Vec<usize>> {
    (0..labels.len())
        .map(|i| {
            (0..labels.len())
                .filter(|&p| p != i && labels[p] == labels[i])
                .collect()
        })
        .collect()
}

/// Supervised contrastive loss over labeled embeddings.
///
/// For each anchor, the mean over its positives of
/// `-log(exp(z_i·z_p/τ) / Σ_{j≠i} exp(z_i·z_j/τ))`, summed over anchors and
/// divided by the number of anchors. Anchors without a positive contribute 0.
pub fn supcon_loss<'t>(z_l: Var<'t>, labels: &[usize], tau: f64) -> Result<AnchoredLoss<'t>> {
    let (n, _) = z_l.shape();
    if labels.len() != n {
        return Err(Error::shape(
            "supcon_loss",
            format!("{} labels for {n} embeddings", labels.len()),
        ));
    }
    if n < 2 {
        return Err(Error::Contract(format!(
            "supcon_loss needs at least 2 instances, got {n}"
        )));
    }
    let logits = z_l.matmul_t(z_l)?.scale(1.0 / tau);
    let mut include = vec![true; n * n];
    for i in 0..n {
        include[i * n + i] = false;
    }
    let log_prob = logits.log_softmax_masked(&include)?;
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
        loss: log_prob.weighted_sum(weights)?,
        anchors_used: used,
    })
}

/// Self-supervised InfoNCE between each embedding and its augmented view.
///
/// Default denominator: `{z_i·z_j : j ≠ i} ∪ {z_i·z_i'}`. With `literal`
/// set, the denominator is `{z_i·z_j : j ∈ B}` and excludes the positive.
pub fn selfcon_loss<'t>(z: Var<'t>, z_aug: Var<'t>, tau: f64, literal: bool) -> Result<Var<'t>> {
    let (n, _) = z.shape();
    if z.shape() != z_aug.shape() {
        let (a, b) = (z.shape(), z_aug.shape());
        return Err(Error::shape(
            "selfcon_loss",
            format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1),
        ));
    }
    if n == 0 {
        return Err(Error::Contract("selfcon_loss on an empty batch".into()));
    }
    let pairwise = z.matmul_t(z)?.scale(1.0 / tau);
    let positive = z.row_dot(z_aug)?.scale(1.0 / tau);
    let logits = pairwise.concat_cols(positive)?;
    let width = n + 1;
    let mut include = vec![true; n * width];
    for i in 0..n {
        if literal {
            include[i * width + n] = false;
        } else {
            include[i * width + i] = false;
        }
    }
    let log_prob = logits.log_softmax_masked(&include)?;
    let mut weights = Tensor2::zeros(n, width);
    for i in 0..n {
        weights.set(i, n, -1.0 / n as f64);
    }
    log_prob.weighted_sum(weights)
}

/// `-(1/n) Σ_i Σ_k q_ik log p_ik` with `log` floored at `LOG_FLOOR`.
pub fn soft_cross_entropy<'t>(p: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
    let (n, _) = p.shape();
    if p.shape() != q.shape() {
        let (a, b) = (p.shape(), q.shape());
        return Err(Error::shape(
            "soft_cross_entropy",
            format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1),
        ));
    }
    Ok(q.mul(p.log_clamped())?.sum().scale(-1.0 / n.max(1) as f64))
}

/// `Σ_k p̄_k log p̄_k` where `p̄` is the batch-mean prediction. Lies in
/// `[-log K, 0]`.
pub fn mean_neg_entropy<'t>(p: Var<'t>) -> Result<Var<'t>> {
    let mean = p.mean_rows();
    Ok(mean.mul(mean.log_clamped())?.sum())
}

pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor2> {
    let mut t = Tensor2::zeros(labels.len(), k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Contract(format!("label {y} out of range for {k} classes")));
        }
        t.set(i, y, 1.0);
    }
    Ok(t)
}

/// Cross-entropy of labeled predictions against their ground-truth labels.
pub fn cls_loss_labeled<'t>(p_l: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (n, k) = p_l.shape();
    if labels.len() != n {
        return Err(Error::shape(
            "cls_loss_labeled",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let y = p_l.tape().constant(one_hot(labels, k)?);
    soft_cross_entropy(p_l, y)
}

/// Self-distillation towards the augmented-view prediction plus the
/// batch-mean negative-entropy regularizer.
pub fn cls_loss_all<'t>(p: Var<'t>, q_aug: &Tensor2) -> Result<Var<'t>> {
    let q = p.tape().constant(q_aug.clone());
    soft_cross_entropy(p, q)?.add(mean_neg_entropy(p)?)
}

/// The four component losses of one head.
#[derive(Debug, Clone, Copy)]
pub struct HeadLosses<'t> {
    pub cls_labeled: Var<'t>,
    pub cls_all: Var<'t>,
    pub rep_labeled: Var<'t>,
    pub rep_all: Var<'t>,
}

impl<'t> HeadLosses<'t> {
    /// `[λ L_l^cls + (1-λ) L_all^cls] + [λ L_l^rep + (1-λ) L_all^rep]`.
    pub fn mix(&self, lambda: f64) -> Result<Var<'t>> {
        let cls = self
            .cls_labeled
            .scale(lambda)
            .add(self.cls_all.scale(1.0 - lambda))?;
        let rep = self
            .rep_labeled
            .scale(lambda)
            .add(self.rep_all.scale(1.0 - lambda))?;
        cls.add(rep)
    }
}

/// Scalar form of [`HeadLosses::mix`].
pub fn mix_scalars(cls_labeled: f64, cls_all: f64, rep_labeled: f64, rep_all: f64, lambda: f64) -> f64 {
    (lambda * cls_labeled + (1.0 - lambda) * cls_all) + (lambda * rep_labeled + (1.0 - lambda) * rep_all)
}
