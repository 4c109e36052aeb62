use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iterations: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            restarts: 20,
            max_iterations: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Raw cluster index per point; every index in `0..k` is used.
    pub labels: Vec<usize>,
    /// Sum of squared distances to the assigned centre.
    pub objective: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-means++ seeding followed by Lloyd iterations, best of
/// `config.restarts` runs by objective (earliest restart wins ties).
///
/// Each restart draws its own seed from `rng` up front, so the result does
/// not depend on the order restarts are evaluated in.
pub fn kmeans_pp(points: &Matrix, k: usize, config: &KMeansConfig, rng: &mut impl Rng) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} points")));
    }
    if config.restarts == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one restart".into()));
    }
    let seeds: Vec<u64> = (0..config.restarts).map(|_| rng.random()).collect();
    let mut best: Option<KMeansResult> = None;
    for seed in seeds {
        let mut local = ChaCha8Rng::seed_from_u64(seed);
        let run = single_run(points, k, config.max_iterations, &mut local);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn seed_centres(points: &Matrix, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if *d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| d2.iter().rposition(|d| *d > 0.0).expect("positive mass"))
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(points.row(i), points.row(next)));
        }
    }
    chosen
}

fn nearest(point: &[f64], centres: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centres.rows() {
        let d = dist2(point, centres.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn single_run(points: &Matrix, k: usize, max_iterations: usize, rng: &mut impl Rng) -> KMeansResult {
    let n = points.rows();
    let dim = points.cols();
    let seeds = seed_centres(points, k, rng);
    let mut centres = Matrix::from_fn(k, dim, |c, j| points[(seeds[c], j)]);
    let mut labels: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centres).0).collect();

    for _ in 0..max_iterations {
        repair_empty(points, &mut labels, &mut centres, k);
        recompute_centres(points, &labels, &mut centres);
        let next: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centres).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    repair_empty(points, &mut labels, &mut centres, k);
    recompute_centres(points, &labels, &mut centres);
    let objective = (0..n).map(|i| dist2(points.row(i), centres.row(labels[i]))).sum();
    KMeansResult { labels, objective }
}

fn recompute_centres(points: &Matrix, labels: &[usize], centres: &mut Matrix) {
    let k = centres.rows();
    let mut counts = vec![0usize; k];
    let mut sums = Matrix::zeros(k, points.cols());
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, p) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
            *s += p;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for (dst, s) in centres.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s / counts[c] as f64;
            }
        }
    }
}

/// Refills each empty cluster with the point of the largest cluster that lies
/// farthest from that cluster's centre.
fn repair_empty(points: &Matrix, labels: &mut [usize], centres: &mut Matrix, k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|c| *c == 0) else {
            return;
        };
        recompute_centres(points, labels, centres);
        let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).expect("k > 0");
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, &l) in labels.iter().enumerate() {
            if l == largest {
                let d = dist2(points.row(i), centres.row(largest));
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        let far = far.expect("largest cluster is non-empty");
        labels[far] = empty;
        let row = points.row(far).to_vec();
        centres.row_mut(empty).copy_from_slice(&row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_obvious_blobs() {
        let pts = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![0.0, 0.1],
            vec![5.0, 5.0],
            vec![5.1, 5.0],
            vec![5.0, 5.1],
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = kmeans_pp(&pts, 2, &KMeansConfig::default(), &mut rng).unwrap();
        assert_eq!(r.labels[0], r.labels[1]);
        assert_eq!(r.labels[0], r.labels[2]);
        assert_eq!(r.labels[3], r.labels[4]);
        assert_ne!(r.labels[0], r.labels[3]);
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let pts = Matrix::from_fn(5, 2, |_, _| 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = kmeans_pp(&pts, 5, &KMeansConfig::default(), &mut rng).unwrap();
        let mut labels = r.labels.clone();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn k_equal_n_gives_singletons() {
        let pts = Matrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 + i as f64 * 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = kmeans_pp(&pts, 6, &KMeansConfig::default(), &mut rng).unwrap();
        let mut labels = r.labels.clone();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 6);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn invalid_k() {
        let pts = Matrix::zeros(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(kmeans_pp(&pts, 0, &KMeansConfig::default(), &mut rng).is_err());
        assert!(kmeans_pp(&pts, 4, &KMeansConfig::default(), &mut rng).is_err());
    }
}
