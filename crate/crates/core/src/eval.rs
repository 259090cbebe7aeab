//! Clustering accuracy under the best one-to-one matching of predicted
//! clusters to classes, and coarse-mapped accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Solves the square assignment problem, returning `assignment[row] = col`
/// with minimum total cost. Among all optimal assignments the
/// lexicographically smallest one is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(Error::shape(
                "hungarian",
                format!("row {i} has {} entries in a {n}-row matrix", row.len()),
            ));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("hungarian: row {i}")));
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (u, v, mut row_to_col) = shortest_augmenting_path(cost);

    let scale = cost
        .iter()
        .flatten()
        .fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale;
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| (cost[i][j] - u[i] - v[j]).abs() <= tol)
                .collect()
        })
        .collect();
    lexicographic_matching(&tight, &mut row_to_col);
    Ok(row_to_col)
}

/// Potential-based O(n³) solver. Returns row potentials, column potentials
/// and an optimal assignment. All reduced costs `c_ij - u_i - v_j` are
/// non-negative and vanish on the assignment.
fn shortest_augmenting_path(cost: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = cost.len();
    // 1-based internally; index 0 is a sentinel column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    (u[1..].to_vec(), v[1..].to_vec(), row_to_col)
}

/// Rewrites a perfect matching of the tight-edge graph into the
/// lexicographically smallest perfect matching of that graph. Every
/// perfect matching of the tight graph is an optimal assignment.
fn lexicographic_matching(tight: &[Vec<usize>], row_to_col: &mut [usize]) {
    let n = row_to_col.len();
    let mut col_to_row = vec![0; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = r;
    }
    for i in 0..n {
        for &j in &tight[i] {
            if j == row_to_col[i] {
                break;
            }
            let holder = col_to_row[j];
            if holder < i {
                continue;
            }
            // Give j to row i; the old holder must reach i's current column
            // through an alternating path among rows after i.
            let freed = row_to_col[i];
            let mut visited = vec![false; n];
            visited[j] = true;
            if augment(holder, freed, i, tight, row_to_col, &mut col_to_row, &mut visited) {
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
    }
}

fn augment(
    row: usize,
    freed: usize,
    fixed_upto: usize,
    tight: &[Vec<usize>],
    row_to_col: &mut [usize],
    col_to_row: &mut [usize],
    visited: &mut [bool],
) -> bool {
    for &c in &tight[row] {
        if visited[c] {
            continue;
        }
        visited[c] = true;
        if c == freed {
            row_to_col[row] = c;
            col_to_row[c] = row;
            return true;
        }
        let next = col_to_row[c];
        if next <= fixed_upto {
            continue;
        }
        if augment(next, freed, fixed_upto, tight, row_to_col, col_to_row, visited) {
            row_to_col[row] = c;
            col_to_row[c] = row;
            return true;
        }
    }
    false
}

pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_all: f64,
    /// `None` when no evaluated instance belongs to a seen class.
    pub acc_seen: Option<f64>,
    /// `None` when no evaluated instance belongs to a novel class.
    pub acc_novel: Option<f64>,
    pub acc_coarse_mapped: Option<f64>,
    /// `permutation[predicted cluster] = matched class`.
    pub permutation: Vec<usize>,
    /// `confusion[predicted][true]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub num_instances: usize,
}

/// Fits one cluster-to-class matching on all instances, then reports
/// accuracy on all of them and on the seen-class and novel-class subsets
/// under that same matching. `seen[i]` says whether instance `i`'s true
/// class is a seen class.
pub fn clustering_acc(preds: &[usize], truths: &[usize], seen: &[bool], k: usize) -> Result<EvalReport> {
    if preds.len() != truths.len() || preds.len() != seen.len() {
        return Err(Error::shape(
            "clustering_acc",
            format!(
                "{} preds, {} truths, {} mask entries",
                preds.len(),
                truths.len(),
                seen.len()
            ),
        ));
    }
    if preds.is_empty() {
        return Err(Error::Contract("clustering_acc on zero instances".into()));
    }
    if let Some(&bad) = preds.iter().chain(truths).find(|&&x| x >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for K={k}")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in preds.iter().zip(truths) {
        confusion[p][t] += 1;
    }
    let max = confusion.iter().flatten().copied().max().unwrap_or(0);
    let cost: Vec<Vec<f64>> = confusion
        .iter()
        .map(|row| row.iter().map(|&c| (max - c) as f64).collect())
        .collect();
    let permutation = hungarian(&cost)?;

    let subset_acc = |keep: &dyn Fn(usize) -> bool| -> Option<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for i in 0..preds.len() {
            if keep(i) {
                total += 1;
                hit += usize::from(permutation[preds[i]] == truths[i]);
            }
        }
        (total > 0).then(|| hit as f64 / total as f64)
    };
    let acc_all = subset_acc(&|_| true).expect("non-empty");
    let acc_seen = subset_acc(&|i| seen[i]);
    let acc_novel = subset_acc(&|i| !seen[i]);
    Ok(EvalReport {
        acc_all,
        acc_seen,
        acc_novel,
        acc_coarse_mapped: None,
        permutation,
        confusion,
        num_instances: preds.len(),
    })
}

/// Fraction of instances whose (already matched) predicted class shares a
/// super-class with the true class.
pub fn coarse_mapped_acc(mapped_preds: &[usize], truths: &[usize], class_to_super: &[usize]) -> Result<f64> {
    if mapped_preds.len() != truths.len() || truths.is_empty() {
        return Err(Error::shape(
            "coarse_mapped_acc",
            format!("{} preds vs {} truths", mapped_preds.len(), truths.len()),
        ));
    }
    let mut hits = 0usize;
    for (&p, &t) in mapped_preds.iter().zip(truths) {
        let (Some(sp), Some(st)) = (class_to_super.get(p), class_to_super.get(t)) else {
            return Err(Error::Contract(format!(
                "class {} has no super-class mapping",
                p.max(t)
            )));
        };
        hits += usize::from(sp == st);
    }
    Ok(hits as f64 / truths.len() as f64)
}

/// Full evaluation: clustering accuracy plus coarse-mapped accuracy under
/// the fitted matching.
pub fn evaluate(
    preds: &[usize],
    truths: &[usize],
    seen: &[bool],
    k: usize,
    class_to_super: &[usize],
) -> Result<EvalReport> {
    let mut report = clustering_acc(preds, truths, seen, k)?;
    let mapped: Vec<usize> = preds.iter().map(|&p| report.permutation[p]).collect();
    report.acc_coarse_mapped = Some(coarse_mapped_acc(&mapped, truths, class_to_super)?);
    Ok(report)
}
