//! Randomized check routines shared by the integration tests and the
//! acceptance runner. Each returns a measured quantity or a description of
//! the first mismatch; the callers decide what to assert or print.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use hiergcd_core::coarse::{coarse_cls_all, coarse_cls_labeled, coarse_rep_all, coarse_rep_labeled, MemoryQueue};
use hiergcd_core::data::{generate, split, Dataset, HierarchySpec, Partition, SplitSpec};
use hiergcd_core::distill::{distill_loss, inferred_prototypes, RelationMatrix};
use hiergcd_core::eval::{assignment_cost, clustering_acc, hungarian};
use hiergcd_core::numerics::{Tape, Tensor2, Var};
use hiergcd_core::schedule::{total_loss, RampSchedule, RampWeights, Schedules};
use hiergcd_core::target::{
    class_probs_with, cls_loss_all, cls_loss_labeled, selfcon_loss, supcon_loss, ContrastConfig, HeadLosses,
};
use hiergcd_core::trainer::{build_objective, sgd_update, TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;

pub const TAU_SUP: f64 = 0.07;
pub const TAU_SELF: f64 = 0.5;

/// One random problem: unit embeddings and their augmented views, target
/// and coarse prototypes, relation logits, labels and fixed soft targets.
pub struct Case {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub kc: usize,
    pub z: Mat,
    pub za: Mat,
    pub c: Mat,
    pub cc: Mat,
    pub w: Mat,
    pub labels: Vec<usize>,
    pub q: Mat,
    pub qc: Mat,
    pub pc: Mat,
    pub temp: Option<f64>,
    pub lambda: f64,
}

impl Case {
    pub fn random(rng: &mut impl Rng) -> Self {
        let n = rng.random_range(2..=16);
        let d = rng.random_range(2..=8);
        let k = rng.random_range(2..=6);
        let kc = rng.random_range(2..=4);
        // Few distinct labels so most anchors have positives, some not.
        let distinct = rng.random_range(1..=k.min(n));
        let temp = if rng.random_bool(0.5) {
            Some(rng.random_range(0.1..1.0))
        } else {
            None
        };
        Self {
            n,
            d,
            k,
            kc,
            z: unit_rows(&rand_mat(rng, n, d)),
            za: unit_rows(&rand_mat(rng, n, d)),
            c: unit_rows(&rand_mat(rng, k, d)),
            cc: unit_rows(&rand_mat(rng, kc, d)),
            w: rand_mat(rng, kc, k),
            labels: rand_labels(rng, n, distinct),
            q: rand_stochastic(rng, n, k),
            qc: rand_stochastic(rng, n, kc),
            pc: rand_stochastic(rng, n, kc),
            temp,
            lambda: rng.random_range(0.0..=1.0),
        }
    }
}

fn norm(v: Var<'_>) -> Var<'_> {
    v.l2_normalize_rows().unwrap()
}

fn konst<'t>(tape: &'t Tape, m: &Mat) -> Var<'t> {
    tape.constant(tensor(m))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn max_entry_err(a: &Tensor2, b: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for (r, row) in b.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            worst = worst.max(rel_err(a.get(r, c), v));
        }
    }
    worst
}

pub const ORACLE_LOSSES: [&str; 15] = [
    "class_probs",
    "supcon",
    "selfcon",
    "selfcon_literal",
    "cls_labeled",
    "cls_all",
    "target_total",
    "coarse_cls_labeled",
    "coarse_cls_all",
    "coarse_rep_labeled",
    "coarse_rep_all",
    "coarse_total",
    "inferred_prototypes",
    "distill",
    "total",
];

/// Largest relative deviation between the library value and the loop
/// oracle for one loss on one case.
pub fn oracle_error(name: &str, case: &Case, rng: &mut impl Rng) -> f64 {
    let tape = Tape::new();
    let z = konst(&tape, &case.z);
    let p_or = probs(&case.z, &case.c, case.temp);
    let pc_or = probs(&case.z, &case.cc, case.temp);
    let scalar = |v: Var| v.item().unwrap();
    match name {
        "class_probs" => {
            let p = class_probs_with(z, konst(&tape, &case.c), case.temp).unwrap();
            max_entry_err(&p.value(), &p_or)
        }
        "supcon" => rel_err(
            scalar(supcon_loss(z, &case.labels, TAU_SUP).unwrap().loss),
            supcon(&case.z, &case.labels, TAU_SUP),
        ),
        "selfcon" | "selfcon_literal" => {
            let literal = name == "selfcon_literal";
            rel_err(
                scalar(selfcon_loss(z, konst(&tape, &case.za), TAU_SELF, literal).unwrap()),
                selfcon(&case.z, &case.za, TAU_SELF, literal),
            )
        }
        "cls_labeled" => rel_err(
            scalar(cls_loss_labeled(konst(&tape, &p_or), &case.labels).unwrap()),
            ce_labels(&p_or, &case.labels),
        ),
        "cls_all" => rel_err(
            scalar(cls_loss_all(konst(&tape, &p_or), &tensor(&case.q)).unwrap()),
            cls_all(&p_or, &case.q),
        ),
        "target_total" => {
            let p = konst(&tape, &p_or);
            let heads = HeadLosses {
                cls_labeled: cls_loss_labeled(p, &case.labels).unwrap(),
                cls_all: cls_loss_all(p, &tensor(&case.q)).unwrap(),
                rep_labeled: supcon_loss(z, &case.labels, TAU_SUP).unwrap().loss,
                rep_all: selfcon_loss(z, konst(&tape, &case.za), TAU_SELF, false).unwrap(),
            };
            let oracle = mix(
                ce_labels(&p_or, &case.labels),
                cls_all(&p_or, &case.q),
                supcon(&case.z, &case.labels, TAU_SUP),
                selfcon(&case.z, &case.za, TAU_SELF, false),
                case.lambda,
            );
            rel_err(scalar(heads.mix(case.lambda).unwrap()), oracle)
        }
        "coarse_cls_labeled" => rel_err(
            scalar(coarse_cls_labeled(konst(&tape, &pc_or), &tensor(&case.qc)).unwrap()),
            soft_ce(&pc_or, &case.qc),
        ),
        "coarse_cls_all" => rel_err(
            scalar(coarse_cls_all(konst(&tape, &pc_or), &tensor(&case.qc)).unwrap()),
            cls_all(&pc_or, &case.qc),
        ),
        "coarse_rep_labeled" => rel_err(
            scalar(coarse_rep_labeled(z, &case.labels).unwrap().loss),
            super::coarse_rep_labeled(&case.z, &case.labels),
        ),
        "coarse_rep_all" => rel_err(
            scalar(coarse_rep_all(z, konst(&tape, &case.cc), &tensor(&case.pc)).unwrap()),
            super::coarse_rep_all(&case.z, &case.cc, &case.pc),
        ),
        "coarse_total" => {
            let pc = konst(&tape, &pc_or);
            let heads = HeadLosses {
                cls_labeled: coarse_cls_labeled(pc, &tensor(&case.qc)).unwrap(),
                cls_all: coarse_cls_all(pc, &tensor(&case.qc)).unwrap(),
                rep_labeled: coarse_rep_labeled(z, &case.labels).unwrap().loss,
                rep_all: coarse_rep_all(z, konst(&tape, &case.cc), &tensor(&pc_or)).unwrap(),
            };
            let oracle = mix(
                soft_ce(&pc_or, &case.qc),
                cls_all(&pc_or, &case.qc),
                super::coarse_rep_labeled(&case.z, &case.labels),
                super::coarse_rep_all(&case.z, &case.cc, &pc_or),
                case.lambda,
            );
            rel_err(scalar(heads.mix(case.lambda).unwrap()), oracle)
        }
        "inferred_prototypes" => {
            let inf = inferred_prototypes(konst(&tape, &case.w), konst(&tape, &case.c)).unwrap();
            max_entry_err(&inf.value(), &inferred(&case.w, &case.c))
        }
        "distill" => {
            let inf = inferred_prototypes(konst(&tape, &case.w), konst(&tape, &case.c)).unwrap();
            let pt2c = class_probs_with(z, inf, case.temp).unwrap();
            let lib = scalar(distill_loss(konst(&tape, &case.pc), pt2c, false).unwrap());
            let pt2c_or = probs(&case.z, &inferred(&case.w, &case.c), case.temp);
            rel_err(lib, distill(&case.pc, &pt2c_or))
        }
        "total" => {
            let draw = |rng: &mut dyn rand::RngCore| {
                if rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random_range(0.0..1.0)
                }
            };
            let weights = RampWeights {
                coarse: draw(rng),
                distill: draw(rng),
            };
            let parts: Vec<f64> = (0..3).map(|_| gauss(rng).abs() * 3.0).collect();
            let s = |v: f64| tape.constant(Tensor2::scalar(v));
            let lib = total_loss(s(parts[0]), Some(s(parts[1])), Some(s(parts[2])), weights).unwrap();
            let oracle = parts[0] + weights.coarse * parts[1] + weights.distill * parts[2];
            rel_err(scalar(lib), oracle)
        }
        other => panic!("unknown loss {other}"),
    }
}

/// Worst oracle deviation per loss over `cases` random cases.
pub fn oracle_suite(cases: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    ORACLE_LOSSES
        .iter()
        .map(|&name| {
            let worst = (0..cases)
                .map(|_| {
                    let case = Case::random(&mut r);
                    oracle_error(name, &case, &mut r)
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

pub const GRAD_LOSSES: [&str; 11] = [
    "supcon",
    "selfcon",
    "selfcon_literal",
    "cls_labeled",
    "cls_all",
    "coarse_cls_labeled",
    "coarse_cls_all",
    "coarse_rep_labeled",
    "coarse_rep_all",
    "distill",
    "distill_symmetric",
];

/// Gradient check of one loss with respect to raw (unnormalized)
/// embeddings and every prototype or relation tensor it depends on.
pub fn grad_case(name: &str, case: &Case, rng: &mut impl Rng) -> GradReport {
    let zr = tensor(&rand_mat(rng, case.n, case.d));
    let zar = tensor(&rand_mat(rng, case.n, case.d));
    let cr = tensor(&rand_mat(rng, case.k, case.d));
    let ccr = tensor(&rand_mat(rng, case.kc, case.d));
    let w = tensor(&case.w);
    let (q, qc, pc) = (tensor(&case.q), tensor(&case.qc), tensor(&case.pc));
    let labels = &case.labels;
    let temp = case.temp;
    match name {
        "supcon" => grad_check(&[zr], &|_, v| supcon_loss(norm(v[0]), labels, TAU_SUP).unwrap().loss),
        "selfcon" | "selfcon_literal" => {
            let literal = name == "selfcon_literal";
            grad_check(&[zr, zar], &|_, v| {
                selfcon_loss(norm(v[0]), norm(v[1]), TAU_SELF, literal).unwrap()
            })
        }
        "cls_labeled" => grad_check(&[zr, cr], &|_, v| {
            cls_loss_labeled(class_probs_with(norm(v[0]), norm(v[1]), temp).unwrap(), labels).unwrap()
        }),
        "cls_all" => grad_check(&[zr, cr], &|_, v| {
            cls_loss_all(class_probs_with(norm(v[0]), norm(v[1]), temp).unwrap(), &q).unwrap()
        }),
        "coarse_cls_labeled" => grad_check(&[zr, ccr], &|_, v| {
            coarse_cls_labeled(class_probs_with(norm(v[0]), norm(v[1]), temp).unwrap(), &qc).unwrap()
        }),
        "coarse_cls_all" => grad_check(&[zr, ccr], &|_, v| {
            coarse_cls_all(class_probs_with(norm(v[0]), norm(v[1]), temp).unwrap(), &qc).unwrap()
        }),
        "coarse_rep_labeled" => grad_check(&[zr], &|_, v| coarse_rep_labeled(norm(v[0]), labels).unwrap().loss),
        "coarse_rep_all" => grad_check(&[zr, ccr], &|_, v| coarse_rep_all(norm(v[0]), norm(v[1]), &pc).unwrap()),
        "distill" => grad_check(&[zr, cr, w], &|tape, v| {
            let inf = inferred_prototypes(v[2], norm(v[1])).unwrap();
            let pt2c = class_probs_with(norm(v[0]), inf, temp).unwrap();
            distill_loss(tape.constant(pc.clone()), pt2c, false).unwrap()
        }),
        "distill_symmetric" => grad_check(&[zr, cr, w, ccr], &|_, v| {
            let z = norm(v[0]);
            let inf = inferred_prototypes(v[2], norm(v[1])).unwrap();
            let pt2c = class_probs_with(z, inf, temp).unwrap();
            let pc = class_probs_with(z, norm(v[3]), temp).unwrap();
            distill_loss(pc, pt2c, true).unwrap()
        }),
        other => panic!("unknown loss {other}"),
    }
}

pub fn gradient_suite(trials: usize, seed: u64) -> Vec<(&'static str, GradReport)> {
    let mut r = rng(seed);
    GRAD_LOSSES
        .iter()
        .map(|&name| {
            let report = (0..trials)
                .map(|_| {
                    let case = Case::random(&mut r);
                    grad_case(name, &case, &mut r)
                })
                .fold(GradReport::default(), GradReport::merge);
            (name, report)
        })
        .collect()
}

/// Largest gradient magnitude reaching the teacher predictions in the
/// default (one-way) distillation loss. Should be exactly 0.
pub fn distill_teacher_grad(case: &Case) -> f64 {
    let tape = Tape::new();
    let pc = tape.param(tensor(&case.pc));
    let z = konst(&tape, &case.z);
    let inf = inferred_prototypes(tape.param(tensor(&case.w)), konst(&tape, &case.c)).unwrap();
    let pt2c = class_probs_with(z, inf, case.temp).unwrap();
    let loss = distill_loss(pc, pt2c, false).unwrap();
    let grads = tape.backward(loss).unwrap();
    grads.get(pc).data().iter().fold(0.0, |m, g| m.max(g.abs()))
}

/// A small labeled hierarchy for trainer-level checks.
pub fn tiny_problem(seed: u64) -> (Dataset, Partition) {
    let spec = HierarchySpec {
        num_super: 2,
        children_per_super: 3,
        dim: 6,
        per_class: 12,
        ..HierarchySpec::default()
    };
    let (mut ds, _) = generate(&spec, seed).unwrap();
    let part = split(
        &mut ds,
        &SplitSpec {
            seed,
            ..SplitSpec::default()
        },
    )
    .unwrap();
    (ds, part)
}

pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 8,
        hidden_dim: 8,
        embed_dim: 5,
        num_coarse: Some(2),
        queue_capacity: 32,
        seed,
        ..TrainConfig::default()
    }
}

/// Gradient check of the complete training objective, with every module
/// active, with respect to every parameter tensor of the model. Fixed
/// targets (augmented-view predictions, queue pseudo-labels, the coarse
/// teacher) are frozen from the first forward pass.
pub fn full_objective_check(symmetric: bool, seed: u64) -> GradReport {
    let (ds, part) = tiny_problem(seed);
    let cfg = TrainConfig {
        symmetric_t2c: symmetric,
        contrast: ContrastConfig {
            proto_temperature: Some(0.5),
            ..ContrastConfig::default()
        },
        schedules: Schedules {
            coarse: RampSchedule::new(1, 3, 0.7).unwrap(),
            distill: RampSchedule::new(1, 3, 0.4).unwrap(),
        },
        ..tiny_config(seed)
    };
    let mut tr = Trainer::new(cfg.clone(), &ds, &part).unwrap();
    // One real step first so the queue holds history for some labels.
    let warm = tr.make_batch();
    tr.train_step(&warm, 2).unwrap();
    let batch = tr.make_batch();
    let weights = cfg.ramp_weights(2);
    let state = tr.state.clone();

    let tape = Tape::new();
    let (obj, frozen) = build_objective(&tape, &state, &cfg, &batch, weights, None).unwrap();
    let grads = tape.backward(obj.total).unwrap();
    let h = &obj.params;
    let analytic: Vec<Tensor2> = h
        .encoder
        .all()
        .iter()
        .chain([&h.target, h.coarse.as_ref().unwrap(), h.relation.as_ref().unwrap()])
        .map(|&v| grads.get(v))
        .collect();
    let inputs: Vec<Tensor2> = state
        .encoder
        .tensors()
        .into_iter()
        .chain([
            &state.target.prototypes,
            &state.coarse.prototypes,
            &state.relation.logits,
        ])
        .cloned()
        .collect();
    let value = |xs: &[Tensor2]| {
        let mut s = state.clone();
        for (dst, src) in s.encoder.tensors_mut().into_iter().zip(xs) {
            *dst = src.clone();
        }
        s.target.prototypes = xs[4].clone();
        s.coarse.prototypes = xs[5].clone();
        s.relation.logits = xs[6].clone();
        let tape = Tape::new();
        let (obj, _) = build_objective(&tape, &s, &cfg, &batch, weights, Some(&frozen)).unwrap();
        obj.total.item().unwrap()
    };
    check_against_fd(&inputs, &analytic, &value)
}

fn int_or_float_costs(rng: &mut impl Rng, n: usize) -> Mat {
    // Small integer costs produce many tied optima.
    let ints = rng.random_bool(0.5);
    (0..n)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if ints {
                        rng.random_range(0..4) as f64
                    } else {
                        rng.random_range(-10.0..10.0)
                    }
                })
                .collect()
        })
        .collect()
}

/// Hungarian against exhaustive search: same optimal cost and the same
/// (lexicographically first) optimal assignment.
pub fn hungarian_suite(matrices: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for i in 0..matrices {
        let n = i % 7 + 1;
        let cost = int_or_float_costs(&mut r, n);
        let got = hungarian(&cost).map_err(|e| e.to_string())?;
        let (best, lexmin) = brute_force_assignment(&cost);
        let c = assignment_cost(&cost, &got);
        if (c - best).abs() > 1e-9 {
            return Err(format!("matrix {i} (n={n}): cost {c} vs optimum {best}"));
        }
        if got != lexmin {
            return Err(format!("matrix {i} (n={n}): {got:?} vs first optimum {lexmin:?}"));
        }
    }
    Ok(())
}

/// Clustering accuracy against the best of all K! relabelings.
pub fn acc_suite(sets: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for i in 0..sets {
        let k = r.random_range(1..=5);
        let n = r.random_range(1..=30);
        let preds = rand_labels(&mut r, n, k);
        let truths = rand_labels(&mut r, n, k);
        let seen: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        let rep = clustering_acc(&preds, &truths, &seen, k).map_err(|e| e.to_string())?;
        let exact = brute_force_acc(&preds, &truths, k);
        if (rep.acc_all - exact).abs() > 1e-12 {
            return Err(format!("set {i}: acc {} vs exhaustive {exact}", rep.acc_all));
        }
    }
    Ok(())
}

/// Ramp values over epochs 1..=400 for the default schedules and a few
/// random ones.
pub fn schedule_suite(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let d = Schedules::default();
    let mut ramps = vec![d.coarse, d.distill];
    for _ in 0..20 {
        let start = r.random_range(1..200);
        let end = start + r.random_range(1..150);
        ramps.push(RampSchedule::new(start, end, r.random_range(0.0..2.0)).unwrap());
    }
    for s in ramps {
        let lam = s.lambda_final;
        let mut prev = 0.0;
        for t in 1..=400 {
            let w = s.weight(t);
            if t < s.start && w != 0.0 {
                return Err(format!("{s:?}: weight {w} before start at t={t}"));
            }
            if t >= s.end && w != lam {
                return Err(format!("{s:?}: weight {w} != {lam} at t={t}"));
            }
            if (w - ramp(s.start, s.end, lam, t)).abs() > 1e-15 {
                return Err(format!("{s:?}: weight {w} off the cosine ramp at t={t}"));
            }
            if w < prev {
                return Err(format!("{s:?}: decreases at t={t}"));
            }
            prev = w;
        }
        if (s.start + s.end) % 2 == 0 {
            let w = s.weight((s.start + s.end) / 2);
            if (w - lam / 2.0).abs() > 1e-15 {
                return Err(format!("{s:?}: midpoint weight {w}"));
            }
        }
    }
    Ok(())
}

fn bits(t: &Tensor2) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

/// Trains through every step up to the coarse start (the ramp weight is
/// still 0 at the start epoch itself) and requires the
/// coarse bank, relation matrix and queue to stay bit-identical, while the
/// encoder moves. Returns the number of steps checked.
pub fn ramp_gating_check(seed: u64) -> Result<usize, String> {
    let (ds, part) = tiny_problem(seed);
    let cfg = TrainConfig {
        schedules: Schedules {
            coarse: RampSchedule::new(4, 6, 0.5).unwrap(),
            distill: RampSchedule::new(5, 7, 0.5).unwrap(),
        },
        epochs: 10,
        ..tiny_config(seed)
    };
    let mut tr = Trainer::new(cfg, &ds, &part).unwrap();
    let coarse0 = bits(&tr.state.coarse.prototypes);
    let relation0 = bits(&tr.state.relation.logits);
    let encoder0 = bits(&tr.state.encoder.w1);
    let mut steps = 0;
    for epoch in 1..=4 {
        for _ in 0..tr.steps_per_epoch() {
            let batch = tr.make_batch();
            let loss = tr.train_step(&batch, epoch).map_err(|e| e.to_string())?;
            steps += 1;
            if bits(&tr.state.coarse.prototypes) != coarse0 {
                return Err(format!("coarse bank changed at epoch {epoch}"));
            }
            if bits(&tr.state.relation.logits) != relation0 {
                return Err(format!("relation matrix changed at epoch {epoch}"));
            }
            if !tr.state.queue.is_empty() {
                return Err(format!("queue written at epoch {epoch}"));
            }
            if loss.coarse_total.is_some() || loss.distill.is_some() {
                return Err(format!("inactive losses reported at epoch {epoch}"));
            }
        }
    }
    if bits(&tr.state.encoder.w1) == encoder0 {
        return Err("encoder never moved".into());
    }
    let batch = tr.make_batch();
    tr.train_step(&batch, 5).map_err(|e| e.to_string())?;
    if bits(&tr.state.coarse.prototypes) == coarse0 {
        return Err("coarse bank still frozen once its ramp started".into());
    }
    Ok(steps)
}

/// Random push sequences against a shadow FIFO. Returns the worst
/// pseudo-label deviation from the exact mean.
pub fn queue_suite(sequences: usize, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for s in 0..sequences {
        let cap = r.random_range(1..=24);
        let kc = r.random_range(2..=4);
        let classes = r.random_range(1..=6);
        let mut queue = MemoryQueue::new(cap, kc).map_err(|e| e.to_string())?;
        let mut shadow: VecDeque<(usize, Vec<f64>)> = VecDeque::new();
        for _ in 0..r.random_range(1..=12) {
            let b = r.random_range(1..=10);
            let labels = rand_labels(&mut r, b, classes);
            let rows = rand_stochastic(&mut r, b, kc);
            queue.push(&labels, &tensor(&rows)).map_err(|e| e.to_string())?;
            for (y, row) in labels.iter().zip(&rows) {
                shadow.push_back((*y, row.clone()));
                if shadow.len() > cap {
                    shadow.pop_front();
                }
            }
            let stored: Vec<(usize, Vec<f64>)> = queue.entries().map(|(y, p)| (y, p.to_vec())).collect();
            if stored != shadow.iter().cloned().collect::<Vec<_>>() {
                return Err(format!("sequence {s}: queue contents diverged from the FIFO"));
            }
            for y in 0..classes {
                let members: Vec<&Vec<f64>> = shadow.iter().filter(|(l, _)| *l == y).map(|(_, p)| p).collect();
                match queue.pseudo_super_label(y) {
                    None if members.is_empty() => {}
                    None => return Err(format!("sequence {s}: missing mean for class {y}")),
                    Some(_) if members.is_empty() => {
                        return Err(format!("sequence {s}: mean for absent class {y}"))
                    }
                    Some(mean) => {
                        for c in 0..kc {
                            let exact = members.iter().map(|p| p[c]).sum::<f64>() / members.len() as f64;
                            worst = worst.max((mean[c] - exact).abs());
                        }
                    }
                }
            }
        }
    }
    Ok(worst)
}

pub struct Recovery {
    pub recovered: usize,
    pub trials: usize,
    pub elapsed: Duration,
}

/// Toy relation recovery: six one-hot target prototypes, two super-classes
/// under a random parent map, one-hot coarse predictions generated from
/// that map. Only the relation logits are optimized, on the distillation
/// loss alone, from the model's own random initialization.
pub fn distill_recovery(trials: usize, seed: u64) -> Recovery {
    const K: usize = 6;
    const KC: usize = 2;
    let start = Instant::now();
    let mut r = rng(seed);
    let protos = Tensor2::identity(K);
    let mut recovered = 0;
    let scale = TrainConfig::default().relation_init_scale;
    for trial in 0..trials {
        let mut parent = vec![0, 0, 0, 1, 1, 1];
        // Random group sizes between 1 and 5, in a random class order.
        let ones = r.random_range(1..K);
        for (j, p) in parent.iter_mut().enumerate() {
            *p = usize::from(j < ones);
        }
        parent.shuffle(&mut r);

        let mut z = Vec::new();
        let mut pc = Vec::new();
        for (j, &sup) in parent.iter().enumerate() {
            for _ in 0..10 {
                let mut v = vec![0.0; K];
                v[j] = 1.0;
                for x in v.iter_mut() {
                    *x += 0.05 * gauss(&mut r);
                }
                z.push(unit(&v));
                let mut row = vec![0.0; KC];
                row[sup] = 1.0;
                pc.push(row);
            }
        }
        let (z, pc) = (tensor(&z), tensor(&pc));
        let mut w = RelationMatrix::random(KC, K, scale, seed.wrapping_add(trial as u64), 13).logits;
        let mut vel = Tensor2::zeros(KC, K);
        for _ in 0..300 {
            let tape = Tape::new();
            let wv = tape.param(w.clone());
            let inf = inferred_prototypes(wv, tape.constant(protos.clone())).unwrap();
            let pt2c = class_probs_with(tape.constant(z.clone()), inf, None).unwrap();
            let loss = distill_loss(tape.constant(pc.clone()), pt2c, false).unwrap();
            let g = tape.backward(loss).unwrap().get(wv);
            sgd_update(&mut w, &mut vel, &g, 5.0, 0.9, 0.0).unwrap();
        }
        if (RelationMatrix { logits: w }).parent_estimate() == parent {
            recovered += 1;
        }
    }
    Recovery {
        recovered,
        trials,
        elapsed: start.elapsed(),
    }
}

/// Accuracy must not change when predicted cluster ids are permuted.
pub fn relabel_invariant(preds: &[usize], truths: &[usize], k: usize, rng: &mut impl Rng) -> Result<(), String> {
    let seen = vec![true; preds.len()];
    let base = clustering_acc(preds, truths, &seen, k).map_err(|e| e.to_string())?;
    let mut sigma: Vec<usize> = (0..k).collect();
    sigma.shuffle(rng);
    let relabeled: Vec<usize> = preds.iter().map(|&p| sigma[p]).collect();
    let moved = clustering_acc(&relabeled, truths, &seen, k).map_err(|e| e.to_string())?;
    if moved.acc_all != base.acc_all {
        return Err(format!("acc {} became {} after relabeling", base.acc_all, moved.acc_all));
    }
    Ok(())
}
