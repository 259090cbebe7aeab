//! Reference implementations written as plain loops over `Vec<Vec<f64>>`,
//! independent of the tape, plus a central-difference gradient checker.
#![allow(dead_code)]

use hiergcd_core::numerics::{Gradients, Tape, Tensor2, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod suites;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut impl Rng) -> f64 {
    // Box-Muller keeps the oracle side free of library samplers.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| gauss(rng)).collect()).collect()
}

pub fn rand_stochastic(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
    (0..r)
        .map(|_| {
            let w: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn rand_labels(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

pub fn tensor(m: &Mat) -> Tensor2 {
    Tensor2::from_rows(m).unwrap()
}

pub fn mat(t: &Tensor2) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn dotv(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = dotv(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn unit_rows(m: &Mat) -> Mat {
    m.iter().map(|r| unit(r)).collect()
}

pub fn ln_clamped(p: f64) -> f64 {
    p.max(1e-12).ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Softmax over cosine scores of unit rows `z` against unit rows `c`.
pub fn probs(z: &Mat, c: &Mat, temperature: Option<f64>) -> Mat {
    let t = temperature.unwrap_or(1.0);
    z.iter()
        .map(|zi| softmax(&c.iter().map(|ck| dotv(zi, ck) / t).collect::<Vec<_>>()))
        .collect()
}

pub fn supcon(z: &Mat, labels: &[usize], tau: f64) -> f64 {
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (dotv(&z[i], &z[j]) / tau).exp();
            }
        }
        let mut acc = 0.0;
        let mut count = 0;
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                acc += -((dotv(&z[i], &z[p]) / tau).exp() / denom).ln();
                count += 1;
            }
        }
        if count > 0 {
            total += acc / count as f64;
        }
    }
    total / n as f64
}

pub fn selfcon(z: &Mat, za: &Mat, tau: f64, literal: bool) -> f64 {
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos = (dotv(&z[i], &za[i]) / tau).exp();
        // Literal form: every unaugmented z_j, the anchor itself included.
        // Default form: the other z_j plus the positive.
        let mut denom = 0.0;
        for j in 0..n {
            if literal || j != i {
                denom += (dotv(&z[i], &z[j]) / tau).exp();
            }
        }
        if !literal {
            denom += pos;
        }
        total += -(pos / denom).ln();
    }
    total / n as f64
}

pub fn ce_labels(p: &Mat, labels: &[usize]) -> f64 {
    let mut s = 0.0;
    for (row, &y) in p.iter().zip(labels) {
        s -= ln_clamped(row[y]);
    }
    s / p.len() as f64
}

pub fn soft_ce(p: &Mat, q: &Mat) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        for k in 0..p[i].len() {
            s -= q[i][k] * ln_clamped(p[i][k]);
        }
    }
    s / p.len() as f64
}

pub fn neg_entropy_of_mean(p: &Mat) -> f64 {
    let k = p[0].len();
    let mut s = 0.0;
    for c in 0..k {
        let mut m = 0.0;
        for row in p {
            m += row[c];
        }
        m /= p.len() as f64;
        s += m * ln_clamped(m);
    }
    s
}

pub fn cls_all(p: &Mat, q: &Mat) -> f64 {
    soft_ce(p, q) + neg_entropy_of_mean(p)
}

pub fn coarse_rep_labeled(z: &Mat, labels: &[usize]) -> f64 {
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut acc = 0.0;
        let mut count = 0;
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                acc += dotv(&z[i], &z[p]);
                count += 1;
            }
        }
        if count > 0 {
            total += acc / count as f64;
        }
    }
    -total / n as f64
}

pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn coarse_rep_all(z: &Mat, cc: &Mat, pc: &Mat) -> f64 {
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let y = argmax_lowest(&pc[i]);
        let mut denom = 0.0;
        for c in cc {
            denom += dotv(&z[i], c).exp();
        }
        total += pc[i][y] * (dotv(&z[i], &cc[y]).exp() / denom).ln();
    }
    -total / n as f64
}

/// Row-softmax of `w` times `c`, rows normalized.
pub fn inferred(w: &Mat, c: &Mat) -> Mat {
    w.iter()
        .map(|row| {
            let a = softmax(row);
            let d = c[0].len();
            let mut out = vec![0.0; d];
            for (j, aj) in a.iter().enumerate() {
                for t in 0..d {
                    out[t] += aj * c[j][t];
                }
            }
            unit(&out)
        })
        .collect()
}

pub fn distill(pc: &Mat, pt2c: &Mat) -> f64 {
    soft_ce(pt2c, pc) + neg_entropy_of_mean(pt2c)
}

pub fn mix(cls_l: f64, cls_a: f64, rep_l: f64, rep_a: f64, lambda: f64) -> f64 {
    lambda * cls_l + (1.0 - lambda) * cls_a + lambda * rep_l + (1.0 - lambda) * rep_a
}

pub fn ramp(start: u32, end: u32, lambda: f64, t: u32) -> f64 {
    if t < start {
        0.0
    } else if t >= end {
        lambda
    } else {
        let x = (t - start) as f64 / (end - start) as f64;
        lambda * (1.0 - (std::f64::consts::PI * x).cos()) / 2.0
    }
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Minimum assignment cost and the lexicographically first optimal
/// assignment, by exhaustive search.
pub fn brute_force_assignment(cost: &Mat) -> (f64, Vec<usize>) {
    let mut best = f64::INFINITY;
    let mut arg = Vec::new();
    for perm in permutations(cost.len()) {
        let c: f64 = perm.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        if c < best {
            best = c;
            arg = perm;
        }
    }
    (best, arg)
}

pub fn brute_force_acc(preds: &[usize], truths: &[usize], k: usize) -> f64 {
    let mut best = 0;
    for perm in permutations(k) {
        let hits = preds.iter().zip(truths).filter(|(&p, &t)| perm[p] == t).count();
        best = best.max(hits);
    }
    best as f64 / preds.len() as f64
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Entry-wise gradient agreement: `|a - f| / max(|a|, |f|, FLOOR)`, where
/// the floor keeps entries that are numerically zero from dividing by 0.
pub const GRAD_FLOOR: f64 = 1e-4;
pub const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub entries: usize,
}

impl GradReport {
    pub fn merge(self, o: GradReport) -> GradReport {
        GradReport {
            max_rel: self.max_rel.max(o.max_rel),
            entries: self.entries + o.entries,
        }
    }
}

/// Compares analytic gradients with central differences of `f` with
/// respect to every entry of every input tensor.
pub fn check_against_fd(inputs: &[Tensor2], analytic: &[Tensor2], f: &dyn Fn(&[Tensor2]) -> f64) -> GradReport {
    let mut report = GradReport::default();
    for (t, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), inputs[t].shape());
        for idx in 0..inputs[t].data().len() {
            let mut plus = inputs.to_vec();
            plus[t].data_mut()[idx] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[t].data_mut()[idx] -= FD_EPS;
            let fd = (f(&plus) - f(&minus)) / (2.0 * FD_EPS);
            let a = grad.data()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_FLOOR);
            report.max_rel = report.max_rel.max(rel);
            report.entries += 1;
        }
    }
    report
}

/// Gradient check for a loss built from parameter leaves.
pub fn grad_check(inputs: &[Tensor2], build: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) -> GradReport {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&tape, &vars);
    let grads: Gradients = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor2> = vars.iter().map(|&v| grads.get(v)).collect();
    let value = |xs: &[Tensor2]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        build(&tape, &vars).item().unwrap()
    };
    check_against_fd(inputs, &analytic, &value)
}
