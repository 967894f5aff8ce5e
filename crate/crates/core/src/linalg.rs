//! Symmetric positive definite factorizations.
//!
//! Small systems go through nalgebra's dense Cholesky. Large sparse precision
//! matrices use a left-looking sparse Cholesky on a reverse Cuthill-McKee
//! ordering, with the Takahashi recurrences giving the entries of the inverse
//! on the factor's sparsity pattern (which always covers the diagonal and the
//! original edges).

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Below this size the dense route is used.
pub const DENSE_LIMIT: usize = 500;

/// Symmetric matrix stored as its diagonal plus the strictly-upper entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric {
    pub diag: Vec<f64>,
    /// `(i, j, value)` with `i < j`, no duplicates.
    pub upper: Vec<(usize, usize, f64)>,
}

impl SparseSymmetric {
    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::from_diagonal(&DVector::from_column_slice(&self.diag));
        for &(i, j, v) in &self.upper {
            m[(i, j)] += v;
            m[(j, i)] += v;
        }
        m
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::from_iterator(self.n(), self.diag.iter().zip(x.iter()).map(|(d, v)| d * v));
        for &(i, j, v) in &self.upper {
            out[i] += v * x[j];
            out[j] += v * x[i];
        }
        out
    }

    pub fn add_to_diagonal(&mut self, ridge: f64) {
        for d in &mut self.diag {
            *d += ridge;
        }
    }
}

/// Dense Cholesky, adding `jitter` to the diagonal and growing it by 10x per
/// failure until it exceeds `max_jitter`. Returns the factor and the jitter
/// that was needed (0 when none).
pub fn cholesky_with_jitter(
    a: &DMatrix<f64>,
    mut jitter: f64,
    max_jitter: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok((c, 0.0));
    }
    while jitter <= max_jitter * (1.0 + 1e-9) {
        let mut shifted = a.clone();
        for i in 0..a.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization {
        min_pivot: min_diagonal(a),
    })
}

fn min_diagonal(a: &DMatrix<f64>) -> f64 {
    a.diagonal().iter().copied().fold(f64::INFINITY, f64::min)
}

/// A factorized SPD matrix.
pub enum SpdFactor {
    Dense {
        chol: Cholesky<f64, Dyn>,
        inverse: DMatrix<f64>,
    },
    Sparse(SparseCholesky),
}

impl SpdFactor {
    /// Factorize, choosing the dense route below [`DENSE_LIMIT`].
    pub fn new(q: &SparseSymmetric) -> Result<Self> {
        if q.n() < DENSE_LIMIT {
            Self::dense(q)
        } else {
            Ok(SpdFactor::Sparse(SparseCholesky::factor(q)?))
        }
    }

    pub fn dense(q: &SparseSymmetric) -> Result<Self> {
        let dense = q.to_dense();
        let chol = Cholesky::new(dense).ok_or_else(|| Error::Factorization {
            min_pivot: dense_min_pivot(&q.to_dense()),
        })?;
        let inverse = chol.inverse();
        Ok(SpdFactor::Dense { chol, inverse })
    }

    /// Smallest squared diagonal of the Cholesky factor.
    pub fn min_pivot(&self) -> f64 {
        match self {
            SpdFactor::Dense { chol, .. } => chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d * d)
                .fold(f64::INFINITY, f64::min),
            SpdFactor::Sparse(s) => s.min_pivot(),
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            SpdFactor::Dense { chol, .. } => chol.solve(b),
            SpdFactor::Sparse(s) => s.solve(b),
        }
    }

    pub fn log_det(&self) -> f64 {
        match self {
            SpdFactor::Dense { chol, .. } => {
                2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
            }
            SpdFactor::Sparse(s) => s.log_det(),
        }
    }

    pub fn inverse_diagonal(&self) -> Vec<f64> {
        match self {
            SpdFactor::Dense { inverse, .. } => inverse.diagonal().iter().copied().collect(),
            SpdFactor::Sparse(s) => (0..s.n).map(|i| s.inverse_entry(i, i)).collect(),
        }
    }

    /// Entry `(i, j)` of the inverse. For the sparse route this must lie on
    /// the factor pattern, which holds for the diagonal and every nonzero of
    /// the factorized matrix.
    pub fn inverse_entry(&self, i: usize, j: usize) -> f64 {
        match self {
            SpdFactor::Dense { inverse, .. } => inverse[(i, j)],
            SpdFactor::Sparse(s) => s.inverse_entry(i, j),
        }
    }
}

fn dense_min_pivot(a: &DMatrix<f64>) -> f64 {
    // Plain Cholesky recording the smallest pivot before it fails.
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut min_pivot = f64::INFINITY;
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        min_pivot = min_pivot.min(d);
        if d <= 0.0 {
            return min_pivot;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    min_pivot
}

/// Reverse Cuthill-McKee ordering; `perm[new] = old`.
pub fn reverse_cuthill_mckee(n: usize, upper: &[(usize, usize, f64)]) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(i, j, v) in upper {
        if v != 0.0 {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (adj[v].len(), v));
    for &start in &by_degree {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (adj[w].len(), w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Sparse lower Cholesky factor `P A P^T = L L^T` with selected inverse.
pub struct SparseCholesky {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// `inv_perm[old] = new`
    inv_perm: Vec<usize>,
    diag: Vec<f64>,
    /// Strictly-lower rows of each column, ascending.
    col_rows: Vec<Vec<usize>>,
    col_vals: Vec<Vec<f64>>,
    /// Inverse entries on the same pattern.
    inv_diag: Vec<f64>,
    inv_vals: Vec<Vec<f64>>,
}

impl SparseCholesky {
    pub fn factor(a: &SparseSymmetric) -> Result<Self> {
        let n = a.n();
        let perm = reverse_cuthill_mckee(n, &a.upper);
        let mut inv_perm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old] = new;
        }

        // Lower-triangular columns of the permuted matrix.
        let mut a_cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in &a.upper {
            let (pi, pj) = (inv_perm[i], inv_perm[j]);
            let (r, c) = if pi > pj { (pi, pj) } else { (pj, pi) };
            a_cols[c].push((r, v));
        }
        for c in &mut a_cols {
            c.sort_by_key(|e| e.0);
        }
        let a_diag: Vec<f64> = (0..n).map(|k| a.diag[perm[k]]).collect();

        // Elimination tree via column structures: struct(L_j) is the
        // union of A's column j and the structures of j's children.
        let mut col_rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for j in 0..n {
            let mut rows: Vec<usize> = a_cols[j].iter().map(|e| e.0).collect();
            for &c in &children[j] {
                rows.extend(col_rows[c].iter().copied().filter(|&r| r > j));
            }
            rows.sort_unstable();
            rows.dedup();
            if let Some(&parent) = rows.first() {
                children[parent].push(j);
            }
            col_rows[j] = rows;
        }

        // Row lists: for each row j, the columns k < j with L[j,k] != 0.
        let mut row_cols: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (k, rows) in col_rows.iter().enumerate() {
            for (pos, &r) in rows.iter().enumerate() {
                row_cols[r].push((k, pos));
            }
        }

        let mut diag = vec![0.0; n];
        let mut col_vals: Vec<Vec<f64>> = col_rows.iter().map(|r| vec![0.0; r.len()]).collect();
        let mut work = vec![0.0; n];
        let mut min_pivot = f64::INFINITY;
        for j in 0..n {
            work[j] = a_diag[j];
            for &(r, v) in &a_cols[j] {
                work[r] = v;
            }
            for &(k, pos) in &row_cols[j] {
                let ljk = col_vals[k][pos];
                work[j] -= ljk * ljk;
                for (q, &r) in col_rows[k].iter().enumerate().skip(pos + 1) {
                    work[r] -= col_vals[k][q] * ljk;
                }
            }
            let pivot = work[j];
            min_pivot = min_pivot.min(pivot);
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(Error::Factorization { min_pivot });
            }
            let ljj = pivot.sqrt();
            diag[j] = ljj;
            work[j] = 0.0;
            for (q, &r) in col_rows[j].iter().enumerate() {
                col_vals[j][q] = work[r] / ljj;
                work[r] = 0.0;
            }
        }

        let mut out = Self {
            n,
            perm,
            inv_perm,
            diag,
            col_rows,
            col_vals,
            inv_diag: vec![0.0; n],
            inv_vals: Vec::new(),
        };
        out.selected_inverse();
        Ok(out)
    }

    fn selected_inverse(&mut self) {
        let n = self.n;
        self.inv_vals = self.col_rows.iter().map(|r| vec![0.0; r.len()]).collect();
        for j in (0..n).rev() {
            let ljj = self.diag[j];
            let rows = &self.col_rows[j];
            let vals = &self.col_vals[j];
            let mut new_vals = vec![0.0; rows.len()];
            for (a, &i) in rows.iter().enumerate() {
                let mut s = 0.0;
                for (b, &k) in rows.iter().enumerate() {
                    s += vals[b] * self.permuted_inverse(i, k);
                }
                new_vals[a] = -s / ljj;
            }
            let mut s = 0.0;
            for (b, _) in rows.iter().enumerate() {
                s += vals[b] * new_vals[b];
            }
            self.inv_diag[j] = 1.0 / (ljj * ljj) - s / ljj;
            self.inv_vals[j] = new_vals;
        }
    }

    /// Inverse entry in permuted coordinates; both indices must already be
    /// computed (greater than the column currently being processed).
    fn permuted_inverse(&self, i: usize, k: usize) -> f64 {
        if i == k {
            return self.inv_diag[i];
        }
        let (r, c) = if i > k { (i, k) } else { (k, i) };
        match self.col_rows[c].binary_search(&r) {
            Ok(pos) => self.inv_vals[c][pos],
            Err(_) => panic!("inverse entry ({r}, {c}) is outside the factor pattern"),
        }
    }

    pub fn inverse_entry(&self, i: usize, j: usize) -> f64 {
        self.permuted_inverse(self.inv_perm[i], self.inv_perm[j])
    }

    pub fn min_pivot(&self) -> f64 {
        self.diag.iter().map(|d| d * d).fold(f64::INFINITY, f64::min)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.diag.iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn nnz(&self) -> usize {
        self.n + self.col_rows.iter().map(Vec::len).sum::<usize>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut x: Vec<f64> = (0..n).map(|k| b[self.perm[k]]).collect();
        // L y = Pb
        for j in 0..n {
            x[j] /= self.diag[j];
            let xj = x[j];
            for (q, &r) in self.col_rows[j].iter().enumerate() {
                x[r] -= self.col_vals[j][q] * xj;
            }
        }
        // L^T z = y
        for j in (0..n).rev() {
            let mut s = x[j];
            for (q, &r) in self.col_rows[j].iter().enumerate() {
                s -= self.col_vals[j][q] * x[r];
            }
            x[j] = s / self.diag[j];
        }
        let mut out = DVector::zeros(n);
        for k in 0..n {
            out[self.perm[k]] = x[k];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_laplacian_system(n: usize, edges: usize, seed: u64) -> SparseSymmetric {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut diag: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut upper = Vec::new();
        let mut seen = std::collections::HashSet::new();
        while upper.len() < edges {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j || !seen.insert((i.min(j), i.max(j))) {
                continue;
            }
            let w = rng.random_range(0.1..1.0);
            diag[i] += w;
            diag[j] += w;
            upper.push((i.min(j), i.max(j), -w));
        }
        SparseSymmetric { diag, upper }
    }

    #[test]
    fn sparse_matches_dense() {
        for seed in 0..5 {
            let q = random_laplacian_system(40, 70, seed);
            let dense = q.to_dense();
            let inv = dense.clone().try_inverse().unwrap();
            let sparse = SparseCholesky::factor(&q).unwrap();
            let b = DVector::from_fn(40, |i, _| (i as f64 * 0.37).sin());
            let x = sparse.solve(&b);
            let x_ref = &inv * &b;
            assert!((x - x_ref).amax() < 1e-10);
            for i in 0..40 {
                assert!((sparse.inverse_entry(i, i) - inv[(i, i)]).abs() < 1e-10);
            }
            for &(i, j, _) in &q.upper {
                assert!((sparse.inverse_entry(i, j) - inv[(i, j)]).abs() < 1e-10);
                assert!((sparse.inverse_entry(j, i) - inv[(i, j)]).abs() < 1e-10);
            }
            let logdet: f64 = dense.clone().cholesky().unwrap().l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            assert!((sparse.log_det() - logdet).abs() < 1e-9);
        }
    }

    #[test]
    fn dense_and_sparse_routes_agree() {
        let q = random_laplacian_system(30, 50, 11);
        let d = SpdFactor::dense(&q).unwrap();
        let s = SpdFactor::Sparse(SparseCholesky::factor(&q).unwrap());
        for (a, b) in d.inverse_diagonal().iter().zip(s.inverse_diagonal()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((d.log_det() - s.log_det()).abs() < 1e-10);
    }

    #[test]
    fn rcm_reduces_path_bandwidth() {
        // A path labelled in scrambled order.
        let n = 50;
        let labels: Vec<usize> = (0..n).map(|i| (i * 17) % n).collect();
        let upper: Vec<_> = labels
            .windows(2)
            .map(|w| (w[0].min(w[1]), w[0].max(w[1]), -1.0))
            .collect();
        let perm = reverse_cuthill_mckee(n, &upper);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let bw = upper.iter().map(|&(i, j, _)| inv[i].abs_diff(inv[j])).max().unwrap();
        assert_eq!(bw, 1);
    }

    #[test]
    fn indefinite_reports_pivot() {
        let q = SparseSymmetric {
            diag: vec![1.0, 1.0],
            upper: vec![(0, 1, -2.0)],
        };
        assert!(matches!(
            SparseCholesky::factor(&q),
            Err(Error::Factorization { min_pivot }) if min_pivot < 0.0
        ));
        assert!(matches!(
            SpdFactor::dense(&q),
            Err(Error::Factorization { min_pivot }) if min_pivot < 0.0
        ));
    }

    #[test]
    fn jitter_escalates() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, jitter) = cholesky_with_jitter(&a, 1e-10, 1e-6).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-6);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky_with_jitter(&bad, 1e-10, 1e-6).is_err());
    }
}
