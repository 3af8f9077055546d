//! Lloyd's k-means with k-means++ seeding and restarts.
//!
//! Everything is sequential with a fixed summation order, so a given seed
//! reproduces the same result bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    /// Independent k-means++ initialisations; the lowest-inertia run is kept.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tol: 1e-9,
            restarts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared Euclidean distances of each row to its assigned centroid.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after every Lloyd update of the kept run, ending with `inertia`.
    pub inertia_history: Vec<f64>,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.n_rows()
    }

    pub fn cluster_sizes(&self) -> Vec<u64> {
        let mut sizes = vec![0u64; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn kmeans_fit(
    rows: &Matrix<f64>,
    k: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<KMeansResult> {
    let n = rows.n_rows();
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Config(format!("k = {k} exceeds number of rows {n}")));
    }
    if params.max_iters < 1 || params.restarts < 1 {
        return Err(Error::Config(
            "max_iters and restarts must be at least 1".into(),
        ));
    }
    if let Some(i) = rows.rows().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidData(format!("non-finite value in row {i}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..params.restarts {
        let init = kmeans_plus_plus(rows, k, &mut rng);
        let run = lloyd(rows, init, params);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn kmeans_plus_plus(rows: &Matrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rows.n_rows();
    let mut centers = Vec::with_capacity(k);
    centers.push(rows.row(rng.gen_range(0..n)).to_vec());
    let mut d2: Vec<f64> = rows
        .rows()
        .map(|r| squared_distance(r, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            rng.gen_range(0..n)
        };
        let c = rows.row(pick).to_vec();
        for (i, r) in rows.rows().enumerate() {
            d2[i] = d2[i].min(squared_distance(r, &c));
        }
        centers.push(c);
    }
    centers
}

/// Assigns every row to its nearest centroid, keeping the current label unless
/// another centroid is strictly closer. Ties go to the lowest index.
fn assign_nearest(
    rows: &Matrix<f64>,
    centroids: &[Vec<f64>],
    assignments: &mut [usize],
    keep_current: bool,
) {
    for (i, r) in rows.rows().enumerate() {
        let mut best_k = if keep_current { assignments[i] } else { 0 };
        let mut best_d = squared_distance(r, &centroids[best_k]);
        for (c, centroid) in centroids.iter().enumerate() {
            let d = squared_distance(r, centroid);
            if d < best_d || (!keep_current && d == best_d && c < best_k) {
                best_d = d;
                best_k = c;
            }
        }
        assignments[i] = best_k;
    }
}

/// Moves the row farthest from its centroid into each empty cluster.
fn repair_empty_clusters(
    rows: &Matrix<f64>,
    centroids: &mut [Vec<f64>],
    assignments: &mut [usize],
) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, r) in rows.rows().enumerate() {
            let a = assignments[i];
            if sizes[a] < 2 {
                continue;
            }
            let d = squared_distance(r, &centroids[a]);
            if far.is_none_or(|(_, fd)| d > fd) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("k <= n leaves a cluster with two or more rows");
        sizes[assignments[i]] -= 1;
        assignments[i] = empty;
        sizes[empty] = 1;
        centroids[empty] = rows.row(i).to_vec();
    }
}

fn cluster_means(rows: &Matrix<f64>, assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = rows.n_cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (r, &a) in rows.rows().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(r) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        debug_assert!(c > 0);
        let c = c as f64;
        s.iter_mut().for_each(|v| *v /= c);
    }
    sums
}

fn inertia(rows: &Matrix<f64>, centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    rows.rows()
        .zip(assignments)
        .map(|(r, &a)| squared_distance(r, &centroids[a]))
        .sum()
}

fn lloyd(rows: &Matrix<f64>, init: Vec<Vec<f64>>, params: &KMeansParams) -> KMeansResult {
    let k = init.len();
    let mut centroids = init;
    let mut assignments = vec![0usize; rows.n_rows()];
    let mut history = Vec::new();

    assign_nearest(rows, &centroids, &mut assignments, false);
    repair_empty_clusters(rows, &mut centroids, &mut assignments);
    centroids = cluster_means(rows, &assignments, k);
    history.push(inertia(rows, &centroids, &assignments));
    let mut iterations = 1;

    while iterations < params.max_iters {
        assign_nearest(rows, &centroids, &mut assignments, true);
        repair_empty_clusters(rows, &mut centroids, &mut assignments);
        let updated = cluster_means(rows, &assignments, k);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        history.push(inertia(rows, &centroids, &assignments));
        iterations += 1;
        if shift <= params.tol {
            break;
        }
    }

    let flat: Vec<f64> = centroids.concat();
    KMeansResult {
        centroids: Matrix::from_vec(k, rows.n_cols(), flat).expect("k x d centroids"),
        assignments,
        inertia: *history.last().expect("at least one update"),
        iterations_run: iterations,
        inertia_history: history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn four_points_two_clusters() {
        let rows = mat(&[&[0.0, 0.0], &[0.0, 1.0], &[10.0, 0.0], &[10.0, 1.0]]);
        let res = kmeans_fit(&rows, 2, 7, &KMeansParams::default()).unwrap();
        let mut cents: Vec<Vec<f64>> = res.centroids.rows().map(<[f64]>::to_vec).collect();
        cents.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(cents, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert_eq!(res.inertia, 1.0);
        assert_eq!(res.assignments[0], res.assignments[1]);
        assert_eq!(res.assignments[2], res.assignments[3]);
        assert_ne!(res.assignments[0], res.assignments[2]);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let rows = mat(&[&[1.0, 2.0], &[3.0, -2.0], &[5.0, 6.0]]);
        let res = kmeans_fit(&rows, 1, 0, &KMeansParams::default()).unwrap();
        assert_eq!(res.centroids.row(0), &[3.0, 2.0]);
        assert!(res.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn k_equals_n_is_perfect_fit() {
        let rows = mat(&[&[1.0], &[2.0], &[4.0], &[8.0], &[-1.0]]);
        let res = kmeans_fit(&rows, 5, 3, &KMeansParams::default()).unwrap();
        assert_eq!(res.inertia, 0.0);
        let mut sizes = res.cluster_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![1; 5]);
        for (i, r) in rows.rows().enumerate() {
            assert_eq!(res.centroids.row(res.assignments[i]), r);
        }
    }

    #[test]
    fn rejects_bad_k_and_non_finite_rows() {
        let rows = mat(&[&[1.0], &[2.0]]);
        assert!(kmeans_fit(&rows, 0, 0, &KMeansParams::default()).is_err());
        assert!(kmeans_fit(&rows, 3, 0, &KMeansParams::default()).is_err());
        let bad = mat(&[&[1.0], &[f64::NAN]]);
        assert!(matches!(
            kmeans_fit(&bad, 1, 0, &KMeansParams::default()),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn duplicate_rows_do_not_leave_empty_clusters() {
        let rows = mat(&[&[1.0], &[1.0], &[1.0], &[2.0]]);
        let res = kmeans_fit(&rows, 3, 11, &KMeansParams::default()).unwrap();
        assert!(res.cluster_sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn empty_cluster_repair_takes_farthest_row() {
        let rows = mat(&[&[0.0], &[1.0], &[5.0]]);
        let mut centroids = vec![vec![2.0], vec![100.0]];
        let mut assignments = vec![0, 0, 0];
        repair_empty_clusters(&rows, &mut centroids, &mut assignments);
        assert_eq!(assignments, vec![0, 0, 1]);
        assert_eq!(centroids[1], vec![5.0]);
    }

    fn random_rows() -> impl Strategy<Value = (Vec<Vec<f64>>, usize, u64)> {
        (2usize..40, 1usize..5, any::<u64>()).prop_flat_map(|(n, d, seed)| {
            (
                prop::collection::vec(prop::collection::vec(-50.0f64..50.0, d), n),
                1..=n.min(6),
                Just(seed),
            )
        })
    }

    proptest! {
        #[test]
        fn inertia_never_increases((rows, k, seed) in random_rows()) {
            let m = Matrix::from_rows(&rows).unwrap();
            let res = kmeans_fit(&m, k, seed, &KMeansParams::default()).unwrap();
            for w in res.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", res.inertia_history);
            }
            prop_assert!(res.assignments.iter().all(|&a| a < k));
            prop_assert!(res.cluster_sizes().iter().all(|&s| s > 0));
        }

        #[test]
        fn centroids_are_means_of_members((rows, k, seed) in random_rows()) {
            let m = Matrix::from_rows(&rows).unwrap();
            let res = kmeans_fit(&m, k, seed, &KMeansParams::default()).unwrap();
            let d = m.n_cols();
            for c in 0..k {
                let members: Vec<&Vec<f64>> = rows.iter().zip(&res.assignments)
                    .filter(|(_, &a)| a == c).map(|(r, _)| r).collect();
                for j in 0..d {
                    let mean = members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64;
                    prop_assert!((res.centroids.row(c)[j] - mean).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn same_seed_same_bits((rows, k, seed) in random_rows()) {
            let m = Matrix::from_rows(&rows).unwrap();
            let a = kmeans_fit(&m, k, seed, &KMeansParams::default()).unwrap();
            let b = kmeans_fit(&m, k, seed, &KMeansParams::default()).unwrap();
            let bits = |r: &KMeansResult| r.centroids.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a), bits(&b));
            prop_assert_eq!(a.assignments, b.assignments);
            prop_assert_eq!(a.inertia.to_bits(), b.inertia.to_bits());
        }
    }
}
