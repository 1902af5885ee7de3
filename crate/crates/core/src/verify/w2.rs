//! Squared Wasserstein-2 distances: exact between equal-size empirical sets,
//! closed form between Gaussians.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::par::Execution;

/// Equal-dimension points, uniformly weighted unless `weights` is given.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    points: Array2<f64>,
    weights: Option<Vec<f64>>,
}

impl SampleSet {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::invalid("sample set must be nonempty"));
        }
        Ok(Self { points, weights: None })
    }

    /// Weights must be non-negative and sum to 1 (within 1e-9).
    pub fn weighted(points: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        let mut s = Self::new(points)?;
        if weights.len() != s.len() {
            return Err(Error::invalid("one weight per point required"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("weights must sum to 1, got {total}")));
        }
        s.weights = Some(weights);
        Ok(s)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("all points must share one dimension"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Array2::from_shape_vec((rows.len(), dim), flat).expect("shape checked"))
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_pair(a: &SampleSet, b: &SampleSet) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("set sizes differ: {} vs {}", a.len(), b.len())));
    }
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    if a.weights.is_some() || b.weights.is_some() {
        return Err(Error::invalid("exact assignment needs uniformly weighted sets"));
    }
    Ok(())
}

/// Row-major squared-distance matrix, rows built in parallel when enabled.
pub fn cost_matrix(a: &SampleSet, b: &SampleSet, exec: Execution) -> Vec<f64> {
    let n = a.len();
    let m = b.len();
    exec.map(n, |i| {
        let ai = a.points.row(i);
        (0..m).map(|j| sq_dist(ai, b.points.row(j))).collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Minimum-cost perfect matching on an `n x n` cost matrix (shortest
/// augmenting paths with dual potentials, `O(n^3)`). Returns `assign` with
/// row `i` matched to column `assign[i]`.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    const FREE: usize = usize::MAX;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut col_of = vec![FREE; n];
    let mut row_of = vec![FREE; n];
    let mut path = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut row_seen = vec![false; n];
    let mut col_seen = vec![false; n];
    let mut remaining: Vec<usize> = Vec::with_capacity(n);
    // column then row reduction, greedily matching rows to free zero-cost
    // columns; the duals stay feasible and every matched edge tight
    for (j, vj) in v.iter_mut().enumerate() {
        *vj = (0..n).map(|i| cost[i * n + j]).fold(f64::INFINITY, f64::min);
    }
    for i in 0..n {
        let row = &cost[i * n..(i + 1) * n];
        let (mut best, mut best_at) = (f64::INFINITY, 0);
        for j in 0..n {
            let r = row[j] - v[j];
            if r < best || (r == best && row_of[j] == FREE && row_of[best_at] != FREE) {
                best = r;
                best_at = j;
            }
        }
        u[i] = best;
        if row_of[best_at] == FREE {
            row_of[best_at] = i;
            col_of[i] = best_at;
        }
    }
    for start in 0..n {
        if col_of[start] != FREE {
            continue;
        }
        // Dijkstra over reduced costs from `start` to the nearest free column
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        row_seen.iter_mut().for_each(|x| *x = false);
        col_seen.iter_mut().for_each(|x| *x = false);
        remaining.clear();
        remaining.extend((0..n).rev());
        let mut i = start;
        let mut reached = 0.0;
        let sink = loop {
            row_seen[i] = true;
            let row = &cost[i * n..(i + 1) * n];
            let ui = u[i];
            let mut best = f64::INFINITY;
            let mut best_at = 0;
            for (k, &j) in remaining.iter().enumerate() {
                let r = reached + row[j] - ui - v[j];
                if r < dist[j] {
                    path[j] = i;
                    dist[j] = r;
                }
                // prefer free columns on ties: the search ends sooner
                if dist[j] < best || (dist[j] == best && row_of[j] == FREE) {
                    best = dist[j];
                    best_at = k;
                }
            }
            reached = best;
            let j = remaining.swap_remove(best_at);
            col_seen[j] = true;
            if row_of[j] == FREE {
                break j;
            }
            i = row_of[j];
        };
        u[start] += reached;
        for r in 0..n {
            if row_seen[r] && r != start {
                u[r] += reached - dist[col_of[r]];
            }
        }
        for c in 0..n {
            if col_seen[c] {
                v[c] -= reached - dist[c];
            }
        }
        let mut j = sink;
        loop {
            let r = path[j];
            row_of[j] = r;
            std::mem::swap(&mut col_of[r], &mut j);
            if r == start {
                break;
            }
        }
    }
    col_of
}

/// `min over permutations s of (1/n) sum_i |a_i - b_s(i)|^2`, solved exactly.
pub fn empirical_w2_sq(a: &SampleSet, b: &SampleSet, exec: Execution) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len();
    let cost = cost_matrix(a, b, exec);
    let assign = min_cost_assignment(&cost, n);
    Ok(assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

/// Same quantity by enumerating every permutation; only for tiny sets.
pub fn brute_force_w2_sq(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len();
    if n > 9 {
        return Err(Error::invalid("brute force is limited to 9 points"));
    }
    let cost = cost_matrix(a, b, Execution::Sequential);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        best = best.min(c);
    });
    Ok(best / n as f64)
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

fn symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::invalid(format!("{what} is not symmetric")));
    }
    Ok(())
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues down to
/// `-1e-10 * max|eig|` are treated as round-off and clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.amax().max(1e-300);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::invalid(format!("{what} is not positive semidefinite")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S2^1/2 S1 S2^1/2)^1/2)`.
pub fn gaussian_w2_sq(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::invalid("mean and covariance dimensions disagree"));
    }
    symmetric(cov1, "cov1")?;
    symmetric(cov2, "cov2")?;
    psd_sqrt(cov1, "cov1")?;
    let s2 = psd_sqrt(cov2, "cov2")?;
    let mut inner = &s2 * cov1 * &s2;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross = psd_sqrt(&inner, "cross term")?;
    let trace = (cov1 + cov2 - cross * 2.0).trace();
    Ok((mu1 - mu2).norm_squared() + trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set(rows: &[[f64; 2]]) -> SampleSet {
        SampleSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hand_examples() {
        let a = set(&[[0.0, 0.0], [2.0, 0.0]]);
        assert_eq!(empirical_w2_sq(&a, &a, Execution::Sequential).unwrap(), 0.0);
        let b = set(&[[3.0, 4.0]]);
        assert_eq!(empirical_w2_sq(&set(&[[0.0, 0.0]]), &b, Execution::Sequential).unwrap(), 25.0);
        let b = set(&[[1.0, 0.0], [3.0, 0.0]]);
        assert_eq!(empirical_w2_sq(&a, &b, Execution::Sequential).unwrap(), 1.0);
        assert_eq!(brute_force_w2_sq(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn rejects_mismatched_sets() {
        let a = set(&[[0.0, 0.0], [2.0, 0.0]]);
        let b = set(&[[1.0, 0.0]]);
        assert!(empirical_w2_sq(&a, &b, Execution::Sequential).is_err());
        let c = SampleSet::new(array![[0.0], [1.0]]).unwrap();
        assert!(empirical_w2_sq(&a, &c, Execution::Sequential).is_err());
        let w = SampleSet::weighted(array![[0.0, 0.0], [1.0, 1.0]], vec![0.3, 0.7]).unwrap();
        assert!(empirical_w2_sq(&a, &w, Execution::Sequential).is_err());
        assert!(SampleSet::weighted(array![[0.0, 0.0]], vec![0.5]).is_err());
    }

    #[test]
    fn gaussian_closed_form_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let z = DVector::from_vec(vec![0.0, 0.0]);
        let m = DVector::from_vec(vec![3.0, 4.0]);
        assert!(gaussian_w2_sq(&z, &i2, &z, &i2).unwrap().abs() < 1e-12);
        assert!((gaussian_w2_sq(&z, &i2, &m, &i2).unwrap() - 25.0).abs() < 1e-12);
        assert!((gaussian_w2_sq(&z, &(&i2 * 4.0), &z, &i2).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_rejects_bad_covariances() {
        let z = DVector::from_vec(vec![0.0, 0.0]);
        let i2 = DMatrix::<f64>::identity(2, 2);
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(gaussian_w2_sq(&z, &neg, &z, &i2).is_err());
        assert!(gaussian_w2_sq(&z, &i2, &z, &asym).is_err());
    }

    #[test]
    fn gaussian_matches_diagonal_formula() {
        // commuting covariances: sum (sqrt(a_i) - sqrt(b_i))^2
        let c1 = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5, 9.0]));
        let c2 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 4.0]));
        let z = DVector::from_vec(vec![0.0; 3]);
        let want: f64 = [(2.0f64, 1.0f64), (0.5, 3.0), (9.0, 4.0)]
            .iter()
            .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
            .sum();
        assert!((gaussian_w2_sq(&z, &c1, &z, &c2).unwrap() - want).abs() < 1e-12);
    }
}
