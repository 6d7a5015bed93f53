//! K-means clustering with k-means++ seeding.
//!
//! Small, deterministic, and self-contained: Lloyd iterations over `f64`
//! features with greedy empty-cluster repair. Inertia (total squared
//! distance to assigned centroids) decreases monotonically across
//! iterations, which the tests pin as an invariant.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::util::rng::rng_for;
use crate::{Result, SegueError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop when no centroid moves farther than this (Euclidean).
    pub tol: f64,
    /// Independent restarts; the lowest-inertia run wins (ties favor the
    /// earliest restart). Restarts are the standard guard against Lloyd's
    /// local minima.
    #[serde(default = "default_n_init")]
    pub n_init: usize,
}

fn default_n_init() -> usize {
    10
}

impl KmeansConfig {
    pub fn new(k: usize) -> Self {
        KmeansConfig { k, max_iter: 300, tol: 1e-4, n_init: default_n_init() }
    }
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub assignments: Vec<u32>,
    pub centroids: Array2<f64>,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each Lloyd iteration (monotone non-increasing).
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first centroid uniform, then each next centroid drawn
/// with probability proportional to squared distance from the chosen set.
fn seed_centroids(features: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, dim) = features.dim();
    let mut centroids = Array2::<f64>::zeros((k, dim));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&features.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(features.row(i).as_slice().unwrap(), centroids.row(0).as_slice().unwrap()))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // All remaining points coincide with a centroid; any index works.
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).assign(&features.row(pick));
        for i in 0..n {
            let d = sq_dist(
                features.row(i).as_slice().unwrap(),
                centroids.row(c).as_slice().unwrap(),
            );
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Cluster `features [N, F]` into `config.k` groups. Deterministic in
/// `(features, config, seed)`.
pub fn kmeans_cluster(
    features: &Array2<f64>,
    config: &KmeansConfig,
    seed: u64,
) -> Result<KmeansResult> {
    let (n, _) = features.dim();
    if config.k < 2 {
        return Err(SegueError::Config("k-means needs k >= 2".into()));
    }
    if n < config.k {
        return Err(SegueError::Config(format!(
            "cannot form {} clusters from {n} points",
            config.k
        )));
    }
    if config.n_init == 0 {
        return Err(SegueError::Config("k-means needs at least one restart".into()));
    }
    let mut best: Option<KmeansResult> = None;
    for restart in 0..config.n_init {
        let mut rng = rng_for(seed, &format!("kmeans-restart-{restart}"));
        let run = lloyd(features, config, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart ran"))
}

/// One Lloyd descent from a fresh k-means++ seeding.
fn lloyd(features: &Array2<f64>, config: &KmeansConfig, rng: &mut ChaCha8Rng) -> KmeansResult {
    let (n, dim) = features.dim();
    let k = config.k;
    let mut centroids = seed_centroids(features, k, rng);
    let mut assignments = vec![0u32; n];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0;

    for _iter in 0..config.max_iter {
        iterations += 1;
        // Assignment step; ties break toward the lower cluster index.
        let mut inertia = 0.0;
        for i in 0..n {
            let row = features.row(i);
            let row = row.as_slice().unwrap();
            let (mut best, mut best_d) = (0usize, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(row, centroids.row(c).as_slice().unwrap());
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignments[i] = best as u32;
            inertia += best_d;
        }
        inertia_trace.push(inertia);

        // Update step.
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i] as usize;
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += &features.row(i);
        }
        // Empty-cluster repair: claim the point farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let (mut far_i, mut far_d) = (0usize, -1.0);
                for i in 0..n {
                    let d = sq_dist(
                        features.row(i).as_slice().unwrap(),
                        centroids.row(assignments[i] as usize).as_slice().unwrap(),
                    );
                    // Only steal from clusters that keep at least one point.
                    if d > far_d && counts[assignments[i] as usize] > 1 {
                        far_d = d;
                        far_i = i;
                    }
                }
                let old = assignments[far_i] as usize;
                counts[old] -= 1;
                let mut row = sums.row_mut(old);
                row -= &features.row(far_i);
                assignments[far_i] = c as u32;
                counts[c] = 1;
                sums.row_mut(c).assign(&features.row(far_i));
            }
        }

        let mut max_shift = 0.0f64;
        for c in 0..k {
            let mut new_c = sums.row(c).to_owned();
            new_c.mapv_inplace(|v| v / counts[c] as f64);
            let shift = sq_dist(
                new_c.as_slice().unwrap(),
                centroids.row(c).as_slice().unwrap(),
            )
            .sqrt();
            max_shift = max_shift.max(shift);
            centroids.row_mut(c).assign(&new_c);
        }
        if max_shift < config.tol {
            break;
        }
    }

    // Final assignment against the settled centroids.
    let mut inertia = 0.0;
    for i in 0..n {
        let row = features.row(i);
        let row = row.as_slice().unwrap();
        let (mut best, mut best_d) = (0usize, f64::INFINITY);
        for c in 0..k {
            let d = sq_dist(row, centroids.row(c).as_slice().unwrap());
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignments[i] = best as u32;
        inertia += best_d;
    }
    inertia_trace.push(inertia);

    KmeansResult { assignments, centroids, inertia, iterations, inertia_trace }
}
