//! Momentum-SGD training of the encoder, the three prototype/relation
//! parameter groups, and the memory queue.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::coarse::{coarse_cls_labeled, coarse_rep_all, coarse_rep_labeled, MemoryQueue};
use crate::data::{augment, feature_sigma, rng_for, Dataset, Partition};
use crate::distill::{distill_loss, inferred_prototypes, RelationMatrix};
use crate::encoder::{EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::numerics::{Tape, Tensor2, Var};
use crate::prototypes::{Granularity, PrototypeBank};
use crate::schedule::{total_loss, RampWeights, Schedules};
use crate::target::{
    class_probs_with, cls_loss_all, cls_loss_labeled, selfcon_loss, supcon_loss, ContrastConfig, HeadLosses,
};

const STREAM_TARGET_BANK: u64 = 11;
const STREAM_COARSE_BANK: u64 = 12;
const STREAM_RELATION: u64 = 13;
const STREAM_AUGMENT: u64 = 20;
const STREAM_LABELED_POOL: u64 = 21;
const STREAM_UNLABELED_POOL: u64 = 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub labeled_fraction: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cosine_decay: bool,
    pub seed: u64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Number of super-class prototypes. `None` takes the dataset's value.
    pub num_coarse: Option<usize>,
    pub queue_capacity: usize,
    pub aug_strength: f64,
    /// Scale of the Gaussian initialization of the relation logits.
    pub relation_init_scale: f64,
    /// Learning-rate multiplier for the encoder and target prototypes.
    pub lr_mult_target: f64,
    pub lr_mult_coarse: f64,
    pub lr_mult_distill: f64,
    pub enable_cgm: bool,
    pub enable_kdm: bool,
    pub symmetric_t2c: bool,
    pub contrast: ContrastConfig,
    pub schedules: Schedules,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            labeled_fraction: 0.5,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            cosine_decay: true,
            seed: 0,
            hidden_dim: 64,
            embed_dim: 32,
            num_coarse: None,
            queue_capacity: 1024,
            aug_strength: 0.1,
            relation_init_scale: 0.1,
            lr_mult_target: 1.0,
            lr_mult_coarse: 1.0,
            lr_mult_distill: 1.0,
            enable_cgm: true,
            enable_kdm: true,
            symmetric_t2c: false,
            contrast: ContrastConfig::default(),
            schedules: Schedules::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return fail(format!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            ));
        }
        if self.labeled_count() < 2 {
            return fail(format!(
                "batches need at least 2 labeled instances, got floor({} * {})",
                self.labeled_fraction, self.batch_size
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative".into());
        }
        for (name, m) in [
            ("lr_mult_target", self.lr_mult_target),
            ("lr_mult_coarse", self.lr_mult_coarse),
            ("lr_mult_distill", self.lr_mult_distill),
        ] {
            if !(m >= 0.0 && m.is_finite()) {
                return fail(format!("{name} must be non-negative, got {m}"));
            }
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return fail("encoder dims must be positive".into());
        }
        if self.queue_capacity == 0 {
            return fail("queue_capacity must be positive".into());
        }
        if !(self.aug_strength >= 0.0) || !(self.relation_init_scale >= 0.0) {
            return fail("aug_strength and relation_init_scale must be non-negative".into());
        }
        if let Some(kc) = self.num_coarse {
            if kc < 2 {
                return fail(format!("num_coarse must be at least 2, got {kc}"));
            }
        }
        self.contrast.validate()?;
        self.schedules.validate()
    }

    pub fn labeled_count(&self) -> usize {
        (self.labeled_fraction * self.batch_size as f64 + 1e-9).floor() as usize
    }

    /// Base learning rate for an epoch (1-based), before module multipliers.
    pub fn lr_at(&self, epoch: u32) -> f64 {
        if !self.cosine_decay {
            return self.lr;
        }
        let progress = f64::from(epoch.saturating_sub(1)) / f64::from(self.epochs);
        0.5 * self.lr * (1.0 + (PI * progress).cos())
    }

    /// Ramp weights after applying the module switches.
    pub fn ramp_weights(&self, epoch: u32) -> RampWeights {
        let w = self.schedules.weights(epoch);
        RampWeights {
            coarse: if self.enable_cgm { w.coarse } else { 0.0 },
            distill: if self.enable_kdm { w.distill } else { 0.0 },
        }
    }

    /// Stable 64-bit FNV-1a hash of the JSON form of the config.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        json.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

/// `v ← μ v + g + wd θ`, `θ ← θ − lr v`.
pub fn sgd_update(
    param: &mut Tensor2,
    velocity: &mut Tensor2,
    grad: &Tensor2,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::shape(
            "sgd_update",
            format!(
                "param {:?}, grad {:?}, velocity {:?}",
                param.shape(),
                grad.shape(),
                velocity.shape()
            ),
        ));
    }
    let v = velocity.data_mut();
    let g = grad.data();
    let p = param.data_mut();
    for i in 0..p.len() {
        v[i] = momentum * v[i] + g[i] + weight_decay * p[i];
        p[i] -= lr * v[i];
    }
    Ok(())
}

/// Momentum buffers, one per trainable tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Velocity {
    pub encoder: [Tensor2; 4],
    pub target: Tensor2,
    pub coarse: Tensor2,
    pub relation: Tensor2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub encoder: EncoderParams,
    pub target: PrototypeBank,
    pub coarse: PrototypeBank,
    pub relation: RelationMatrix,
    pub queue: MemoryQueue,
    pub velocity: Velocity,
    /// Number of completed epochs.
    pub epoch: u32,
}

impl ModelState {
    pub fn init(cfg: &TrainConfig, input_dim: usize, num_classes: usize, num_coarse: usize) -> Result<Self> {
        let encoder = EncoderParams::init(cfg.seed, input_dim, cfg.hidden_dim, cfg.embed_dim)?;
        let target = PrototypeBank::init(num_classes, cfg.embed_dim, Granularity::Target, cfg.seed, STREAM_TARGET_BANK)?;
        let coarse = PrototypeBank::init(num_coarse, cfg.embed_dim, Granularity::Coarse, cfg.seed, STREAM_COARSE_BANK)?;
        let relation = RelationMatrix::random(num_coarse, num_classes, cfg.relation_init_scale, cfg.seed, STREAM_RELATION);
        let velocity = Velocity {
            encoder: encoder.tensors().map(|t| Tensor2::zeros(t.rows(), t.cols())),
            target: Tensor2::zeros(num_classes, cfg.embed_dim),
            coarse: Tensor2::zeros(num_coarse, cfg.embed_dim),
            relation: Tensor2::zeros(num_coarse, num_classes),
        };
        Ok(Self {
            encoder,
            target,
            coarse,
            relation,
            queue: MemoryQueue::new(cfg.queue_capacity, num_coarse)?,
            velocity,
            epoch: 0,
        })
    }

    pub fn embed(&self, x: &Tensor2) -> Result<Tensor2> {
        self.encoder.encode(x)
    }

    /// Target-class probabilities for raw features.
    pub fn target_probs(&self, x: &Tensor2, temperature: Option<f64>) -> Result<Tensor2> {
        let z = self.embed(x)?;
        probs_of(&z, &self.target.prototypes, temperature)
    }

    /// Super-class probabilities for raw features.
    pub fn coarse_probs(&self, x: &Tensor2, temperature: Option<f64>) -> Result<Tensor2> {
        let z = self.embed(x)?;
        probs_of(&z, &self.coarse.prototypes, temperature)
    }

    pub fn predict(&self, x: &Tensor2) -> Result<Vec<usize>> {
        let z = self.embed(x)?;
        Ok(z.matmul_t(&self.target.prototypes.l2_normalize_rows()?)?.argmax_rows())
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.target.prototypes.is_finite()
            && self.coarse.prototypes.is_finite()
            && self.relation.logits.is_finite()
    }
}

fn probs_of(z: &Tensor2, protos: &Tensor2, temperature: Option<f64>) -> Result<Tensor2> {
    let tape = Tape::new();
    let p = class_probs_with(
        tape.constant(z.clone()),
        tape.constant(protos.l2_normalize_rows()?),
        temperature,
    )?;
    Ok(p.value())
}

/// Draws indices from a pool without replacement, reshuffling once every
/// index has been handed out.
#[derive(Debug, Clone)]
pub struct PoolSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl PoolSampler {
    pub fn new(pool: Vec<usize>, rng: ChaCha8Rng) -> Self {
        let mut s = Self {
            order: pool.clone(),
            pool,
            cursor: 0,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.clone_from(&self.pool);
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn draw(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.pool.is_empty() {
            return out;
        }
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// One mini-batch: labeled instances first, each with two augmented views.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub num_labeled: usize,
    /// Target labels of the labeled prefix.
    pub labels: Vec<usize>,
    pub view: Tensor2,
    pub view_aug: Tensor2,
}

/// Per-step values of every component loss and both ramp weights. Losses of
/// a module that was not part of the objective at this step are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub target_cls_labeled: f64,
    pub target_cls_all: f64,
    pub target_rep_labeled: f64,
    pub target_rep_all: f64,
    pub coarse_cls_labeled: Option<f64>,
    pub coarse_cls_all: Option<f64>,
    pub coarse_rep_labeled: Option<f64>,
    pub coarse_rep_all: Option<f64>,
    pub distill: Option<f64>,
    pub target_total: f64,
    pub coarse_total: Option<f64>,
    pub total: f64,
    pub f_c: f64,
    pub f_t2c: f64,
    /// Labeled instances whose pseudo-super-label fell back to their own
    /// coarse prediction.
    pub queue_fallbacks: usize,
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    #[serde(rename = "L_target")]
    pub l_target: f64,
    #[serde(rename = "L_coarse")]
    pub l_coarse: Option<f64>,
    #[serde(rename = "L_t2c")]
    pub l_t2c: Option<f64>,
    pub f_c: f64,
    pub f_t2c: f64,
    pub acc_all: f64,
    pub acc_seen: Option<f64>,
    pub acc_novel: Option<f64>,
    pub acc_coarse_mapped: Option<f64>,
}

/// Tape handles of the tensors that receive updates at this step. Modules
/// whose ramp weight is 0 have no handle.
#[derive(Debug, Clone, Copy)]
pub struct ParamHandles<'t> {
    pub encoder: EncoderVars<'t>,
    pub target: Var<'t>,
    pub coarse: Option<Var<'t>>,
    pub relation: Option<Var<'t>>,
}

/// Values that enter the objective as fixed targets: augmented-view
/// predictions, pseudo-super-labels, and the coarse predictions used as
/// weights and as the distillation teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTargets {
    pub q_aug: Tensor2,
    pub qc_aug: Option<Tensor2>,
    pub pseudo: Option<Tensor2>,
    pub pc: Option<Tensor2>,
    pub fallbacks: usize,
}

/// The assembled objective of one step and its parts.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub target: HeadLosses<'t>,
    pub target_total: Var<'t>,
    pub coarse: Option<HeadLosses<'t>>,
    pub coarse_total: Option<Var<'t>>,
    pub distill: Option<Var<'t>>,
    pub params: ParamHandles<'t>,
}

impl Objective<'_> {
    pub fn breakdown(&self, weights: RampWeights, fallbacks: usize) -> Result<LossBreakdown> {
        let item = |v: Var| v.item();
        let c = self.coarse;
        Ok(LossBreakdown {
            target_cls_labeled: item(self.target.cls_labeled)?,
            target_cls_all: item(self.target.cls_all)?,
            target_rep_labeled: item(self.target.rep_labeled)?,
            target_rep_all: item(self.target.rep_all)?,
            coarse_cls_labeled: c.map(|h| item(h.cls_labeled)).transpose()?,
            coarse_cls_all: c.map(|h| item(h.cls_all)).transpose()?,
            coarse_rep_labeled: c.map(|h| item(h.rep_labeled)).transpose()?,
            coarse_rep_all: c.map(|h| item(h.rep_all)).transpose()?,
            distill: self.distill.map(item).transpose()?,
            target_total: item(self.target_total)?,
            coarse_total: self.coarse_total.map(item).transpose()?,
            total: item(self.total)?,
            f_c: weights.coarse,
            f_t2c: weights.distill,
            queue_fallbacks: fallbacks,
        })
    }
}

/// Records the full training objective for one batch on `tape`.
///
/// Without `frozen`, the fixed targets are taken from this forward pass
/// and the queue, and returned. Passing them back in rebuilds the same
/// function of the parameters, which is what finite-difference checks
/// need.
pub fn build_objective<'t>(
    tape: &'t Tape,
    state: &ModelState,
    cfg: &TrainConfig,
    batch: &Batch,
    weights: RampWeights,
    frozen: Option<&FrozenTargets>,
) -> Result<(Objective<'t>, FrozenTargets)> {
    let coarse_on = weights.coarse != 0.0;
    let distill_on = weights.distill != 0.0;
    let temp = cfg.contrast.proto_temperature;
    let labeled: Vec<usize> = (0..batch.num_labeled).collect();

    let enc = state.encoder.on_tape(tape);
    let (target_raw, target_unit) = state.target.on_tape(tape)?;
    let z = enc.forward(tape.constant(batch.view.clone()))?;
    let z_aug = enc.forward(tape.constant(batch.view_aug.clone()))?;
    let z_l = z.select_rows(&labeled)?;

    let p = class_probs_with(z, target_unit, temp)?;
    let q_aug = match frozen {
        Some(f) => f.q_aug.clone(),
        None => class_probs_with(z_aug, target_unit, temp)?.value(),
    };
    let target = HeadLosses {
        cls_labeled: cls_loss_labeled(p.select_rows(&labeled)?, &batch.labels)?,
        cls_all: cls_loss_all(p, &q_aug)?,
        rep_labeled: supcon_loss(z_l, &batch.labels, cfg.contrast.tau_sup)?.loss,
        rep_all: selfcon_loss(z, z_aug, cfg.contrast.tau_self, cfg.contrast.eq2_literal)?,
    };
    let target_total = target.mix(cfg.contrast.lambda_bal)?;

    // An inactive coarse bank enters as a constant and is never updated.
    let (coarse_raw, coarse_unit) = if coarse_on {
        let (raw, unit) = state.coarse.on_tape(tape)?;
        (Some(raw), unit)
    } else {
        (None, tape.constant(state.coarse.prototypes.l2_normalize_rows()?))
    };
    let pc = if coarse_on || distill_on {
        Some(class_probs_with(z, coarse_unit, temp)?)
    } else {
        None
    };
    let pc_value = match frozen {
        Some(f) => f.pc.clone(),
        None => pc.map(|v| v.value()),
    };

    let mut out = FrozenTargets {
        q_aug,
        qc_aug: None,
        pseudo: None,
        pc: pc_value.clone(),
        fallbacks: 0,
    };
    let coarse = if coarse_on {
        let pc = pc.expect("coarse predictions exist when the head is on");
        let pc_value = pc_value.as_ref().expect("coarse predictions exist when the head is on");
        let pc_l = pc.select_rows(&labeled)?;
        let (pseudo, misses) = match frozen.and_then(|f| f.pseudo.clone()) {
            Some(p) => (p, frozen.map_or(0, |f| f.fallbacks)),
            None => state
                .queue
                .pseudo_labels(&batch.labels, &pc_value.select_rows(&labeled)?)?,
        };
        let qc_aug = match frozen.and_then(|f| f.qc_aug.clone()) {
            Some(q) => q,
            None => class_probs_with(z_aug, coarse_unit, temp)?.value(),
        };
        let heads = HeadLosses {
            cls_labeled: coarse_cls_labeled(pc_l, &pseudo)?,
            cls_all: cls_loss_all(pc, &qc_aug)?,
            rep_labeled: coarse_rep_labeled(z_l, &batch.labels)?.loss,
            rep_all: coarse_rep_all(z, coarse_unit, pc_value)?,
        };
        out.pseudo = Some(pseudo);
        out.qc_aug = Some(qc_aug);
        out.fallbacks = misses;
        Some(heads)
    } else {
        None
    };
    let coarse_total = coarse.map(|h| h.mix(cfg.contrast.lambda_bal)).transpose()?;

    let mut relation_raw = None;
    let distill = if distill_on {
        let w = state.relation.on_tape(tape);
        relation_raw = Some(w);
        let inferred = inferred_prototypes(w, target_unit)?;
        let pt2c = class_probs_with(z, inferred, temp)?;
        let teacher = if cfg.symmetric_t2c {
            pc.expect("coarse predictions exist when distillation is on")
        } else {
            tape.constant(pc_value.clone().expect("coarse predictions exist when distillation is on"))
        };
        Some(distill_loss(teacher, pt2c, cfg.symmetric_t2c)?)
    } else {
        None
    };

    let total = total_loss(target_total, coarse_total, distill, weights)?;
    Ok((
        Objective {
            total,
            target,
            target_total,
            coarse,
            coarse_total,
            distill,
            params: ParamHandles {
                encoder: enc,
                target: target_raw,
                coarse: coarse_raw,
                relation: relation_raw,
            },
        },
        out,
    ))
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub state: ModelState,
    ds: &'a Dataset,
    part: &'a Partition,
    labeled: PoolSampler,
    unlabeled: PoolSampler,
    aug_rng: ChaCha8Rng,
    sigma: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, ds: &'a Dataset, part: &'a Partition) -> Result<Self> {
        cfg.validate()?;
        if part.labeled.is_empty() || part.unlabeled.is_empty() {
            return Err(Error::Contract("both the labeled and unlabeled pools must be nonempty".into()));
        }
        let num_coarse = cfg.num_coarse.unwrap_or(ds.num_super);
        if num_coarse < 2 {
            return Err(Error::Config(format!("num_coarse must be at least 2, got {num_coarse}")));
        }
        let state = ModelState::init(&cfg, ds.dim, ds.num_classes, num_coarse)?;
        Ok(Self {
            labeled: PoolSampler::new(part.labeled.clone(), rng_for(cfg.seed, STREAM_LABELED_POOL)),
            unlabeled: PoolSampler::new(part.unlabeled.clone(), rng_for(cfg.seed, STREAM_UNLABELED_POOL)),
            aug_rng: rng_for(cfg.seed, STREAM_AUGMENT),
            sigma: feature_sigma(ds),
            cfg,
            state,
            ds,
            part,
        })
    }

    /// Resumes from a saved model state.
    pub fn with_state(mut self, state: ModelState) -> Self {
        self.state = state;
        self
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.ds.instances.len() / self.cfg.batch_size).max(1)
    }

    pub fn make_batch(&mut self) -> Batch {
        let n_l = self.cfg.labeled_count().min(self.cfg.batch_size);
        let mut indices = self.labeled.draw(n_l);
        indices.extend(self.unlabeled.draw(self.cfg.batch_size - n_l));
        let labels = indices[..n_l].iter().map(|&i| self.ds.instances[i].target).collect();
        let mut view = Vec::with_capacity(indices.len() * self.ds.dim);
        let mut view_aug = Vec::with_capacity(indices.len() * self.ds.dim);
        for &i in &indices {
            let x = &self.ds.instances[i].features;
            view.extend(augment(x, self.cfg.aug_strength, self.sigma, &mut self.aug_rng));
            view_aug.extend(augment(x, self.cfg.aug_strength, self.sigma, &mut self.aug_rng));
        }
        let n = indices.len();
        Batch {
            num_labeled: n_l,
            labels,
            view: Tensor2::new(n, self.ds.dim, view).expect("sized by construction"),
            view_aug: Tensor2::new(n, self.ds.dim, view_aug).expect("sized by construction"),
            indices,
        }
    }

    /// One forward/backward pass and parameter update at `epoch` (1-based).
    pub fn train_step(&mut self, batch: &Batch, epoch: u32) -> Result<LossBreakdown> {
        let weights = self.cfg.ramp_weights(epoch);
        let tape = Tape::new();
        let (obj, frozen) = build_objective(&tape, &self.state, &self.cfg, batch, weights, None)?;
        let breakdown = obj.breakdown(weights, frozen.fallbacks)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at epoch {epoch}: {}",
                serde_json::to_string(&breakdown).unwrap_or_default()
            )));
        }

        let mut grads = tape.backward(obj.total)?;
        let cfg = &self.cfg;
        let lr = cfg.lr_at(epoch);
        let (mu, wd) = (cfg.momentum, cfg.weight_decay);
        let st = &mut self.state;
        let lr_t = lr * cfg.lr_mult_target;
        let h = &obj.params;
        for ((param, vel), var) in st
            .encoder
            .tensors_mut()
            .into_iter()
            .zip(st.velocity.encoder.iter_mut())
            .zip(h.encoder.all())
        {
            sgd_update(param, vel, &grads.take(var), lr_t, mu, wd)?;
        }
        sgd_update(
            &mut st.target.prototypes,
            &mut st.velocity.target,
            &grads.take(h.target),
            lr_t,
            mu,
            wd,
        )?;
        st.target.renormalize()?;
        if let Some(c) = h.coarse {
            sgd_update(
                &mut st.coarse.prototypes,
                &mut st.velocity.coarse,
                &grads.take(c),
                lr * cfg.lr_mult_coarse,
                mu,
                wd,
            )?;
            st.coarse.renormalize()?;
        }
        if let Some(w) = h.relation {
            sgd_update(
                &mut st.relation.logits,
                &mut st.velocity.relation,
                &grads.take(w),
                lr * cfg.lr_mult_distill,
                mu,
                wd,
            )?;
        }
        // Pseudo-labels for this step were read above, before the push.
        if let Some(pc) = &frozen.pc {
            let labeled: Vec<usize> = (0..batch.num_labeled).collect();
            st.queue.push(&batch.labels, &pc.select_rows(&labeled)?)?;
        }
        if !st.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after update at epoch {epoch}: {}",
                serde_json::to_string(&breakdown).unwrap_or_default()
            )));
        }
        Ok(breakdown)
    }

    /// Runs one epoch and returns the mean breakdown over its steps.
    pub fn run_epoch(&mut self, epoch: u32) -> Result<LossBreakdown> {
        let steps = self.steps_per_epoch();
        let mut rows = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = self.make_batch();
            rows.push(self.train_step(&batch, epoch)?);
        }
        self.state.epoch = epoch;
        Ok(mean_breakdown(&rows))
    }

    /// Evaluates on the unlabeled pool with clean features.
    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate_state(&self.state, self.ds, self.part)
    }

    pub fn dataset(&self) -> &Dataset {
        self.ds
    }

    pub fn partition(&self) -> &Partition {
        self.part
    }
}

/// Clustering accuracy of the target head on the unlabeled pool.
pub fn evaluate_state(state: &ModelState, ds: &Dataset, part: &Partition) -> Result<EvalReport> {
    let x = ds.features(&part.unlabeled);
    let preds = state.predict(&x)?;
    let truths: Vec<usize> = part.unlabeled.iter().map(|&i| ds.instances[i].target).collect();
    let seen: Vec<bool> = truths.iter().map(|&t| part.seen[t]).collect();
    evaluate(&preds, &truths, &seen, ds.num_classes, &ds.class_to_super())
}

fn mean_breakdown(rows: &[LossBreakdown]) -> LossBreakdown {
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&LossBreakdown) -> f64| rows.iter().map(f).sum::<f64>() / n;
    // Optional components are averaged over the steps that produced them.
    let mean_opt = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    LossBreakdown {
        target_cls_labeled: mean(&|r| r.target_cls_labeled),
        target_cls_all: mean(&|r| r.target_cls_all),
        target_rep_labeled: mean(&|r| r.target_rep_labeled),
        target_rep_all: mean(&|r| r.target_rep_all),
        coarse_cls_labeled: mean_opt(&|r| r.coarse_cls_labeled),
        coarse_cls_all: mean_opt(&|r| r.coarse_cls_all),
        coarse_rep_labeled: mean_opt(&|r| r.coarse_rep_labeled),
        coarse_rep_all: mean_opt(&|r| r.coarse_rep_all),
        distill: mean_opt(&|r| r.distill),
        target_total: mean(&|r| r.target_total),
        coarse_total: mean_opt(&|r| r.coarse_total),
        total: mean(&|r| r.total),
        f_c: rows.last().map_or(0.0, |r| r.f_c),
        f_t2c: rows.last().map_or(0.0, |r| r.f_t2c),
        queue_fallbacks: rows.iter().map(|r| r.queue_fallbacks).sum(),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: ModelState,
    pub history: Vec<EpochMetrics>,
    pub losses: Vec<LossBreakdown>,
    pub report: EvalReport,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Trains for `cfg.epochs` epochs. With an output directory, appends one
/// metrics line per epoch and rewrites the checkpoint after every epoch.
pub fn train(cfg: &TrainConfig, ds: &Dataset, part: &Partition, out_dir: Option<&Path>) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(cfg.clone(), ds, part)?;
    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.epochs as usize);
    let mut losses = Vec::with_capacity(cfg.epochs as usize);
    let mut report = None;
    for epoch in 1..=cfg.epochs {
        let mean = trainer.run_epoch(epoch)?;
        let r = trainer.evaluate()?;
        let line = EpochMetrics {
            epoch,
            l_target: mean.target_total,
            l_coarse: mean.coarse_total,
            l_t2c: mean.distill,
            f_c: mean.f_c,
            f_t2c: mean.f_t2c,
            acc_all: r.acc_all,
            acc_seen: r.acc_seen,
            acc_novel: r.acc_novel,
            acc_coarse_mapped: r.acc_coarse_mapped,
        };
        if let (Some((w, path)), Some(dir)) = (metrics.as_mut(), out_dir) {
            let json = serde_json::to_string(&line).map_err(|e| Error::Serde(e.to_string()))?;
            writeln!(w, "{json}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
            Checkpoint::new(cfg, &trainer.state).save(dir.join(CHECKPOINT_FILE))?;
        }
        history.push(line);
        losses.push(mean);
        report = Some(r);
    }
    Ok(TrainOutput {
        state: trainer.state,
        history,
        losses,
        report: report.expect("at least one epoch"),
    })
}
