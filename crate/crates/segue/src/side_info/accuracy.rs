//! Clustering accuracy: best label-to-cluster matching.
//!
//! Cluster ids are arbitrary, so accuracy against ground truth is computed
//! under the best one-to-one relabeling — a maximum-weight assignment on
//! the cluster/label contingency table, solved exactly with the Hungarian
//! algorithm in O(K^3).

use ndarray::Array2;

use crate::{Result, SegueError};

/// Exact minimum-cost assignment on an `n x m` matrix (`n <= m`) using the
/// potentials-and-augmenting-paths formulation. Returns, for each row, its
/// assigned column.
fn hungarian_min(cost: &Array2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    assert!(n <= m, "hungarian_min needs rows <= cols");
    // 1-based arrays; p[j] = row matched to column j.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Unwind the augmenting path.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Fraction of samples correctly labeled under the best one-to-one mapping
/// from cluster ids to class labels.
pub fn clustering_accuracy(assignments: &[u32], labels: &[u32]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(SegueError::Config(format!(
            "{} assignments vs {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if assignments.is_empty() {
        return Err(SegueError::Config("clustering accuracy of zero samples".into()));
    }
    let k_a = *assignments.iter().max().expect("non-empty") as usize + 1;
    let k_l = *labels.iter().max().expect("non-empty") as usize + 1;
    let k = k_a.max(k_l);
    let mut counts = Array2::<f64>::zeros((k, k));
    for (&a, &l) in assignments.iter().zip(labels) {
        counts[[a as usize, l as usize]] += 1.0;
    }
    // Maximize matched counts == minimize negated counts.
    let matching = hungarian_min(&counts.mapv(|v| -v));
    let matched: f64 = matching
        .iter()
        .enumerate()
        .map(|(cluster, &label)| counts[[cluster, label]])
        .sum();
    Ok(matched / assignments.len() as f64)
}
