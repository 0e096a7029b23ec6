//! Lloyd's algorithm with k-means++ seeding.
//!
//! All distance and mean computations run in f64 so the objective trace is
//! monotone to within f64 rounding; centroids are returned as f32.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DictionaryError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once the relative objective decrease falls below this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub dim: usize,
    /// Cluster index per point.
    pub assignments: Vec<usize>,
    /// `k` rows of length `dim`, each the mean of its members.
    pub centroids: Vec<Vec<f32>>,
    /// Objective after every centroid update, first to last.
    pub objective_trace: Vec<f64>,
    /// Set when the requested `k` exceeded the number of points.
    pub requested_k: Option<usize>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        self.assignments.iter().for_each(|&a| sizes[a] += 1);
        sizes
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

/// Sum over points of the squared distance to their assigned centroid.
pub fn kmeans_objective(points: &[f32], dim: usize, assignments: &[usize], centroids: &[Vec<f32>]) -> Result<f64> {
    if dim == 0 || !points.len().is_multiple_of(dim) || points.len() / dim != assignments.len() {
        return Err(DictionaryError::ShapeMismatch(format!(
            "{} values of dim {dim} for {} assignments",
            points.len(),
            assignments.len()
        )));
    }
    let mut total = 0.0;
    for (p, &a) in points.chunks(dim).zip(assignments) {
        let c = centroids
            .get(a)
            .filter(|c| c.len() == dim)
            .ok_or_else(|| DictionaryError::ShapeMismatch(format!("assignment {a} has no centroid of dim {dim}")))?;
        total += p
            .iter()
            .zip(c)
            .map(|(&x, &m)| (x as f64 - m as f64).powi(2))
            .sum::<f64>();
    }
    Ok(total)
}

fn kmeans_pp(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let as_f64 = |i: usize| row(i).iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centres = vec![as_f64(first)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
            pick.expect("positive total weight")
        } else {
            // Every remaining point coincides with a centre.
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[next] = true;
        let c = as_f64(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centres.push(c);
    }
    centres
}

fn assign(points: &[f32], dim: usize, centres: &[Vec<f64>], out: &mut [usize]) {
    for (p, a) in points.chunks(dim).zip(out.iter_mut()) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centres.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        *a = best;
    }
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &[f32], dim: usize, centres: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centres.len();
    let mut sizes = vec![0usize; k];
    assignments.iter().for_each(|&a| sizes[a] += 1);
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.chunks(dim).enumerate() {
            let a = assignments[i];
            if sizes[a] < 2 {
                continue;
            }
            let d = sq_dist(p, &centres[a]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("n >= k guarantees a donor cluster");
        sizes[assignments[i]] -= 1;
        assignments[i] = empty;
        sizes[empty] = 1;
        centres[empty] = points[i * dim..(i + 1) * dim].iter().map(|&v| v as f64).collect();
    }
}

fn update(points: &[f32], dim: usize, k: usize, assignments: &[usize]) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.chunks(dim).zip(assignments) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, &v)| *s += v as f64);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        debug_assert!(c > 0);
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    sums
}

fn objective64(points: &[f32], dim: usize, centres: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .chunks(dim)
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centres[a]))
        .sum()
}

/// Partitions `n = points.len() / dim` points into `k` clusters.
///
/// `k` larger than `n` is clamped to `n` (recorded in
/// [`Clustering::requested_k`]). Nearest-centroid ties go to the lowest index.
pub fn kmeans(points: &[f32], dim: usize, k: usize, seed: u64, config: &KMeansConfig) -> Result<Clustering> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(DictionaryError::ShapeMismatch(format!(
            "{} values of dim {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if n == 0 {
        return Err(DictionaryError::EmptyInput);
    }
    if k == 0 {
        return Err(DictionaryError::ShapeMismatch("k must be at least 1".into()));
    }
    let requested_k = (k > n).then(|| {
        log::warn!("k-means: requested {k} clusters for {n} points, clamping to {n}");
        k
    });
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = kmeans_pp(points, dim, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut previous: Option<Vec<usize>> = None;
    let mut trace: Vec<f64> = Vec::new();
    for _ in 0..config.max_iter.max(1) {
        assign(points, dim, &centres, &mut assignments);
        repair_empty(points, dim, &mut centres, &mut assignments);
        centres = update(points, dim, k, &assignments);
        let obj = objective64(points, dim, &centres, &assignments);
        let unchanged = previous.as_ref() == Some(&assignments);
        let small_step = trace.last().is_some_and(|&prev| prev - obj <= config.tol * prev);
        trace.push(obj);
        if unchanged || small_step {
            break;
        }
        previous = Some(assignments.clone());
    }
    Ok(Clustering {
        dim,
        assignments,
        centroids: centres
            .into_iter()
            .map(|c| c.into_iter().map(|v| v as f32).collect())
            .collect(),
        objective_trace: trace,
        requested_k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = [1.0, 2.0, 3.0, 4.0, -2.0, 0.5, 7.0, 1.0, 0.0, 0.0];
        let c = kmeans(&pts, 2, 1, 9, &KMeansConfig::default()).unwrap();
        assert!((c.centroids[0][0] - 1.8).abs() < 1e-6);
        assert!((c.centroids[0][1] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn two_well_separated_pairs() {
        let pts = [0.0, 0.0, 0.1, 0.0, 10.0, 0.0, 10.1, 0.0];
        let c = kmeans(&pts, 2, 2, 1, &KMeansConfig::default()).unwrap();
        let mut xs: Vec<f32> = c.centroids.iter().map(|c| c[0]).collect();
        xs.sort_by(f32::total_cmp);
        assert!((xs[0] - 0.05).abs() < 1e-6 && (xs[1] - 10.05).abs() < 1e-5);
        assert!(c.centroids.iter().all(|c| c[1] == 0.0));
    }

    #[test]
    fn k_above_n_is_clamped_to_singletons() {
        let pts = [0.0, 1.0, 5.0];
        let c = kmeans(&pts, 1, 7, 3, &KMeansConfig::default()).unwrap();
        assert_eq!(c.k(), 3);
        assert_eq!(c.requested_k, Some(7));
        assert_eq!(c.sizes(), vec![1, 1, 1]);
        assert_eq!(c.objective(), 0.0);
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let pts = [2.0f32; 8];
        let c = kmeans(&pts, 2, 3, 0, &KMeansConfig::default()).unwrap();
        assert!(c.sizes().iter().all(|&s| s >= 1));
        assert_eq!(c.objective(), 0.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            kmeans(&[], 2, 1, 0, &KMeansConfig::default()),
            Err(DictionaryError::EmptyInput)
        ));
    }

    #[test]
    fn objective_reference_values() {
        assert_eq!(kmeans_objective(&[3.0, 4.0], 2, &[0], &[vec![0.0, 0.0]]).unwrap(), 25.0);
        assert_eq!(
            kmeans_objective(&[1.0, 1.0, 2.0, 2.0], 2, &[0, 1], &[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap(),
            0.0
        );
        assert!(kmeans_objective(&[1.0, 1.0], 2, &[0, 0], &[vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn seeded_runs_repeat() {
        let pts: Vec<f32> = (0..60).map(|i| ((i * 37 % 17) as f32).sin()).collect();
        let a = kmeans(&pts, 3, 4, 42, &KMeansConfig::default()).unwrap();
        let b = kmeans(&pts, 3, 4, 42, &KMeansConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
