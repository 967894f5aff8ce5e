//! Gaussian conditional random field over one graph snapshot.
//!
//! The model couples `K` base predictions per node with `L` similarity
//! graphs. Its precision is
//! `Q = 2 diag(sum_k alpha_k) + 2 sum_l beta_l Lap(S_l)` and its linear term
//! `b_i = 2 sum_k alpha_{k,i} R_{k,i}`, so the conditional density of `y` is
//! `N(Q^-1 b, Q^-1)`.

mod train;

pub use train::{maximize_mean_likelihood, train_gcrf, TrainConfig, TrainReport};

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{SparseSymmetric, SpdFactor};
use crate::similarity::SimilarityMatrix;
use crate::textfmt::Record;

/// Pivot below which the ridge guard kicks in.
pub const MIN_PIVOT: f64 = 1e-12;
pub const RIDGE: f64 = 1e-10;

/// Inputs for one target timestep.
#[derive(Debug, Clone)]
pub struct GcrfSnapshot {
    /// `K x N` base predictions.
    pub predictions: DMatrix<f64>,
    pub similarities: Vec<SimilarityMatrix>,
    pub target: Option<DVector<f64>>,
    /// `K x N` base predictive variances.
    pub variances: Option<DMatrix<f64>>,
    /// `N x d` node features.
    pub features: Option<DMatrix<f64>>,
    /// Steps ahead, starting at 1.
    pub horizon: usize,
}

impl GcrfSnapshot {
    pub fn new(predictions: DMatrix<f64>, similarities: Vec<SimilarityMatrix>) -> Result<Self> {
        let n = predictions.ncols();
        if predictions.nrows() == 0 || n == 0 {
            return Err(Error::InvalidInput("snapshot needs at least one predictor and node".into()));
        }
        for s in &similarities {
            if s.n() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: s.n(),
                });
            }
        }
        if predictions.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite base prediction".into()));
        }
        Ok(Self {
            predictions,
            similarities,
            target: None,
            variances: None,
            features: None,
            horizon: 1,
        })
    }

    pub fn with_target(mut self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: y.len(),
            });
        }
        self.target = Some(y);
        Ok(self)
    }

    pub fn with_variances(mut self, v: DMatrix<f64>) -> Result<Self> {
        if v.shape() != self.predictions.shape() {
            return Err(Error::InvalidInput("variance channel must match predictions".into()));
        }
        if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::InvalidInput("variances must be positive and finite".into()));
        }
        self.variances = Some(v);
        Ok(self)
    }

    pub fn with_features(mut self, x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: x.nrows(),
            });
        }
        self.features = Some(x);
        Ok(self)
    }

    pub fn with_horizon(mut self, p: usize) -> Self {
        self.horizon = p.max(1);
        self
    }

    pub fn k(&self) -> usize {
        self.predictions.nrows()
    }

    pub fn n(&self) -> usize {
        self.predictions.ncols()
    }

    pub fn l(&self) -> usize {
        self.similarities.len()
    }

    pub fn target(&self) -> Result<&DVector<f64>> {
        self.target.as_ref().ok_or(Error::MissingChannel("target"))
    }
}

fn check_shapes(alpha: &DMatrix<f64>, beta: &[f64], snapshot: &GcrfSnapshot) -> Result<()> {
    if alpha.shape() != snapshot.predictions.shape() {
        return Err(Error::InvalidInput(format!(
            "alpha is {:?} but predictions are {:?}",
            alpha.shape(),
            snapshot.predictions.shape()
        )));
    }
    if beta.len() != snapshot.l() {
        return Err(Error::DimensionMismatch {
            expected: snapshot.l(),
            got: beta.len(),
        });
    }
    Ok(())
}

/// Precision matrix for per-node association weights `alpha` (`K x N`).
pub fn assemble_precision(
    alpha: &DMatrix<f64>,
    beta: &[f64],
    snapshot: &GcrfSnapshot,
) -> Result<SparseSymmetric> {
    check_shapes(alpha, beta, snapshot)?;
    let n = snapshot.n();
    let mut diag: Vec<f64> = (0..n).map(|i| 2.0 * alpha.column(i).sum()).collect();
    let mut off: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (s, b) in snapshot.similarities.iter().zip(beta) {
        for (i, j, w) in s.edges() {
            let c = 2.0 * b * w;
            diag[i] += c;
            diag[j] += c;
            *off.entry((i, j)).or_insert(0.0) -= c;
        }
    }
    Ok(SparseSymmetric {
        diag,
        upper: off.into_iter().map(|((i, j), v)| (i, j, v)).collect(),
    })
}

pub fn assemble_b(alpha: &DMatrix<f64>, snapshot: &GcrfSnapshot) -> Result<DVector<f64>> {
    if alpha.shape() != snapshot.predictions.shape() {
        return Err(Error::InvalidInput("alpha must match predictions".into()));
    }
    Ok(DVector::from_iterator(
        snapshot.n(),
        (0..snapshot.n()).map(|i| 2.0 * alpha.column(i).dot(&snapshot.predictions.column(i))),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcrfPosterior {
    pub mu: DVector<f64>,
    /// `[Q^-1]_ii`
    pub var_diag: DVector<f64>,
    pub log_det_q: f64,
    /// Whether the ridge guard had to shift the diagonal.
    pub ridge_added: bool,
}

/// Factorize `q`, adding [`RIDGE`] to its diagonal once if a pivot falls
/// below [`MIN_PIVOT`].
pub(crate) fn factorize(q: &SparseSymmetric) -> Result<(SpdFactor, bool)> {
    let first = SpdFactor::new(q);
    if let Ok(f) = &first {
        if f.min_pivot() >= MIN_PIVOT {
            return Ok((first.unwrap(), false));
        }
    }
    let mut shifted = q.clone();
    shifted.add_to_diagonal(RIDGE);
    match SpdFactor::new(&shifted) {
        Ok(f) if f.min_pivot() > 0.0 => {
            log::debug!("ridge {RIDGE:e} added to precision diagonal");
            Ok((f, true))
        }
        Ok(f) => Err(Error::Factorization {
            min_pivot: f.min_pivot(),
        }),
        Err(e) => Err(first.err().unwrap_or(e)),
    }
}

pub fn posterior(q: &SparseSymmetric, b: &DVector<f64>) -> Result<GcrfPosterior> {
    if b.len() != q.n() {
        return Err(Error::DimensionMismatch {
            expected: q.n(),
            got: b.len(),
        });
    }
    let (f, ridge_added) = factorize(q)?;
    Ok(GcrfPosterior {
        mu: f.solve(b),
        var_diag: DVector::from_vec(f.inverse_diagonal()),
        log_det_q: f.log_det(),
        ridge_added,
    })
}

/// Log-likelihood of a snapshot's target and its derivatives with respect
/// to every `alpha_{k,i}` and `beta_l`.
#[derive(Debug, Clone)]
pub struct LikelihoodTerms {
    pub value: f64,
    /// `K x N`
    pub d_alpha: DMatrix<f64>,
    pub d_beta: Vec<f64>,
    pub ridge_added: bool,
}

pub fn log_likelihood(alpha: &DMatrix<f64>, beta: &[f64], snapshot: &GcrfSnapshot) -> Result<f64> {
    let y = snapshot.target()?;
    let q = assemble_precision(alpha, beta, snapshot)?;
    let b = assemble_b(alpha, snapshot)?;
    let (f, _) = factorize(&q)?;
    let r = y - f.solve(&b);
    Ok(gaussian_log_density(&q, &r, f.log_det()))
}

fn gaussian_log_density(q: &SparseSymmetric, r: &DVector<f64>, log_det: f64) -> f64 {
    let n = r.len() as f64;
    -0.5 * r.dot(&q.mul_vec(r)) + 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

pub fn likelihood_terms(
    alpha: &DMatrix<f64>,
    beta: &[f64],
    snapshot: &GcrfSnapshot,
) -> Result<LikelihoodTerms> {
    let y = snapshot.target()?;
    let q = assemble_precision(alpha, beta, snapshot)?;
    let b = assemble_b(alpha, snapshot)?;
    let (f, ridge_added) = factorize(&q)?;
    let mu = f.solve(&b);
    let r = y - &mu;
    let value = gaussian_log_density(&q, &r, f.log_det());
    let n = snapshot.n();
    let sigma_diag = f.inverse_diagonal();
    let per_node: Vec<f64> = (0..n)
        .map(|i| -y[i] * y[i] + mu[i] * mu[i] + sigma_diag[i])
        .collect();
    let d_alpha = DMatrix::from_fn(snapshot.k(), n, |k, i| {
        per_node[i] + 2.0 * r[i] * snapshot.predictions[(k, i)]
    });
    let d_beta = snapshot
        .similarities
        .iter()
        .map(|s| {
            s.edges()
                .into_iter()
                .map(|(i, j, w)| {
                    w * (-(y[i] - y[j]).powi(2) + (mu[i] - mu[j]).powi(2) + sigma_diag[i]
                        + sigma_diag[j]
                        - 2.0 * f.inverse_entry(i, j))
                })
                .sum()
        })
        .collect();
    Ok(LikelihoodTerms {
        value,
        d_alpha,
        d_beta,
        ridge_added,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlphaMode {
    /// One `alpha_k` shared by all nodes.
    Shared,
    /// One `alpha_{k,i}` per predictor and node.
    PerNode,
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlphaMode::Shared => "shared",
            AlphaMode::PerNode => "per-node",
        })
    }
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "shared" => Ok(AlphaMode::Shared),
            "per-node" | "pernode" => Ok(AlphaMode::PerNode),
            other => Err(Error::Parse(format!("unknown alpha mode {other}"))),
        }
    }
}

/// Log-parameters: `alpha = exp(u)`, `beta = exp(v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcrfParams {
    pub mode: AlphaMode,
    pub k: usize,
    pub n: usize,
    /// length `k` (shared) or `k * n` indexed `k * n + i` (per node)
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

pub const GCRF_FORMAT: &str = "tgcrf-gcrf 1";

impl GcrfParams {
    /// `alpha = beta = 1`.
    pub fn init(mode: AlphaMode, k: usize, n: usize, l: usize) -> Self {
        let len = match mode {
            AlphaMode::Shared => k,
            AlphaMode::PerNode => k * n,
        };
        Self {
            mode,
            k,
            n,
            u: vec![0.0; len],
            v: vec![0.0; l],
        }
    }

    pub fn l(&self) -> usize {
        self.v.len()
    }

    pub fn beta(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.exp()).collect()
    }

    /// `K x N` association weights for a snapshot with `n` nodes.
    pub fn alpha(&self, n: usize) -> Result<DMatrix<f64>> {
        match self.mode {
            AlphaMode::Shared => Ok(DMatrix::from_fn(self.k, n, |k, _| self.u[k].exp())),
            AlphaMode::PerNode if n == self.n => {
                Ok(DMatrix::from_fn(self.k, n, |k, i| self.u[k * n + i].exp()))
            }
            AlphaMode::PerNode => Err(Error::DimensionMismatch {
                expected: self.n,
                got: n,
            }),
        }
    }

    fn check(&self, snapshot: &GcrfSnapshot) -> Result<()> {
        if snapshot.k() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: snapshot.k(),
            });
        }
        if snapshot.l() != self.l() {
            return Err(Error::DimensionMismatch {
                expected: self.l(),
                got: snapshot.l(),
            });
        }
        Ok(())
    }

    pub fn precision(&self, snapshot: &GcrfSnapshot) -> Result<SparseSymmetric> {
        self.check(snapshot)?;
        assemble_precision(&self.alpha(snapshot.n())?, &self.beta(), snapshot)
    }

    pub fn b(&self, snapshot: &GcrfSnapshot) -> Result<DVector<f64>> {
        self.check(snapshot)?;
        assemble_b(&self.alpha(snapshot.n())?, snapshot)
    }

    pub fn predict(&self, snapshot: &GcrfSnapshot) -> Result<GcrfPosterior> {
        posterior(&self.precision(snapshot)?, &self.b(snapshot)?)
    }

    pub fn log_likelihood(&self, snapshot: &GcrfSnapshot) -> Result<f64> {
        self.check(snapshot)?;
        log_likelihood(&self.alpha(snapshot.n())?, &self.beta(), snapshot)
    }

    /// Log-likelihood and its gradient with respect to `(u, v)`.
    pub fn gradient(&self, snapshot: &GcrfSnapshot) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.check(snapshot)?;
        let alpha = self.alpha(snapshot.n())?;
        let beta = self.beta();
        let t = likelihood_terms(&alpha, &beta, snapshot)?;
        let chained = t.d_alpha.component_mul(&alpha);
        let du = match self.mode {
            AlphaMode::Shared => chained.row_iter().map(|r| r.sum()).collect(),
            AlphaMode::PerNode => {
                let n = snapshot.n();
                (0..self.k * n).map(|idx| chained[(idx / n, idx % n)]).collect()
            }
        };
        let dv = t.d_beta.iter().zip(&beta).map(|(g, b)| g * b).collect();
        Ok((t.value, du, dv))
    }

    pub(crate) fn write_fields(&self, rec: &mut Record) {
        rec.push("mode", self.mode);
        rec.push("k", self.k);
        rec.push("n", self.n);
        rec.push("l", self.l());
        rec.push_floats("u", &self.u);
        rec.push_floats("v", &self.v);
    }

    pub(crate) fn read_fields(rec: &Record) -> Result<Self> {
        let mode: AlphaMode = rec.parse("mode")?;
        let k: usize = rec.parse("k")?;
        let n: usize = rec.parse("n")?;
        let l: usize = rec.parse("l")?;
        let len = match mode {
            AlphaMode::Shared => k,
            AlphaMode::PerNode => k * n,
        };
        Ok(Self {
            mode,
            k,
            n,
            u: rec.floats_len("u", len)?,
            v: rec.floats_len("v", l)?,
        })
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut rec = Record::default();
        self.write_fields(&mut rec);
        rec.write(GCRF_FORMAT, w)
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        Self::read_fields(&Record::read(GCRF_FORMAT, r)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::SimilarityKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sim(n: usize, edges: &[(usize, usize, f64)]) -> SimilarityMatrix {
        let mut v = DMatrix::zeros(n, n);
        for &(i, j, s) in edges {
            v[(i, j)] = s;
            v[(j, i)] = s;
        }
        SimilarityMatrix::new(v, SimilarityKind::Given, None).unwrap()
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, k: usize, l: usize) -> (DMatrix<f64>, Vec<f64>, GcrfSnapshot) {
        let preds = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
        let sims = (0..l)
            .map(|_| {
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in i + 1..n {
                        if rng.random_bool(0.4) {
                            edges.push((i, j, rng.random_range(0.0..1.5)));
                        }
                    }
                }
                sim(n, &edges)
            })
            .collect();
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let alpha = DMatrix::from_fn(k, n, |_, _| rng.random_range(0.2..2.0));
        let beta = (0..l).map(|_| rng.random_range(0.1..2.0)).collect();
        let snap = GcrfSnapshot::new(preds, sims).unwrap().with_target(y).unwrap();
        (alpha, beta, snap)
    }

    #[test]
    fn single_node_precision() {
        let snap = GcrfSnapshot::new(DMatrix::from_element(1, 1, 0.5), vec![]).unwrap();
        let q = assemble_precision(&DMatrix::from_element(1, 1, 1.0), &[], &snap).unwrap();
        assert_eq!(q.to_dense(), DMatrix::from_element(1, 1, 2.0));
        let b = assemble_b(&DMatrix::from_element(1, 1, 1.0), &snap).unwrap();
        assert_eq!(b[0], 1.0);
        let p = posterior(&q, &b).unwrap();
        assert!((p.mu[0] - 0.5).abs() < 1e-15 && (p.var_diag[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_node_precision_and_fixed_point() {
        let snap = GcrfSnapshot::new(DMatrix::from_element(1, 2, 2.0), vec![sim(2, &[(0, 1, 1.0)])]).unwrap();
        let q = assemble_precision(&DMatrix::from_element(1, 2, 1.0), &[1.0], &snap).unwrap();
        assert_eq!(q.to_dense(), DMatrix::from_row_slice(2, 2, &[4.0, -2.0, -2.0, 4.0]));
        // 2 mu = 4 on each row; equal predictions are a fixed point of the coupling
        let b = assemble_b(&DMatrix::from_element(1, 2, 1.0), &snap).unwrap();
        assert_eq!(b.as_slice(), &[4.0, 4.0]);
        let p = posterior(&q, &b).unwrap();
        assert!((p.mu[0] - 2.0).abs() < 1e-14 && (p.mu[1] - 2.0).abs() < 1e-14);
        let half = posterior(&q, &DVector::from_vec(vec![2.0, 2.0])).unwrap();
        assert!((half.mu[0] - 1.0).abs() < 1e-14 && (half.mu[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn b_weights_predictors() {
        let snap = GcrfSnapshot::new(DMatrix::from_column_slice(2, 1, &[0.2, 0.6]), vec![]).unwrap();
        let b = assemble_b(&DMatrix::from_column_slice(2, 1, &[1.0, 3.0]), &snap).unwrap();
        assert!((b[0] - 4.0).abs() < 1e-15);
        let zero = assemble_b(&DMatrix::zeros(2, 1), &snap).unwrap();
        assert_eq!(zero[0], 0.0);
    }

    #[test]
    fn tiny_beta_decouples_nodes() {
        let preds = DMatrix::from_row_slice(2, 3, &[0.1, 0.5, -0.3, 0.4, 0.2, 0.0]);
        let snap = GcrfSnapshot::new(preds.clone(), vec![sim(3, &[(0, 1, 1.0), (1, 2, 0.5)])]).unwrap();
        let alpha = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, 3.0, 1.0, 1.5]);
        let q = assemble_precision(&alpha, &[1e-12], &snap).unwrap();
        let p = posterior(&q, &assemble_b(&alpha, &snap).unwrap()).unwrap();
        for i in 0..3 {
            let sa = alpha.column(i).sum();
            assert!((q.diag[i] - 2.0 * sa).abs() < 1e-10);
            let weighted = alpha.column(i).dot(&preds.column(i)) / sa;
            assert!((p.mu[i] - weighted).abs() < 1e-10);
            assert!((p.var_diag[i] - 1.0 / (2.0 * sa)).abs() < 1e-10);
        }
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, beta, snap) = random_instance(&mut rng, 8, 2, 2);
        let q = assemble_precision(&DMatrix::zeros(2, 8), &beta, &snap).unwrap().to_dense();
        for i in 0..8 {
            assert!(q.row(i).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(1..=20);
            let (alpha, beta, snap) = random_instance(&mut rng, n, 3, 2);
            let q = assemble_precision(&alpha, &beta, &snap).unwrap();
            let b = assemble_b(&alpha, &snap).unwrap();
            let p = posterior(&q, &b).unwrap();
            let inv = q.to_dense().try_inverse().unwrap();
            let mu = &inv * &b;
            for i in 0..n {
                assert!((p.mu[i] - mu[i]).abs() < 1e-10);
                assert!((p.var_diag[i] - inv[(i, i)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn scalar_likelihood_matches_density() {
        let snap = GcrfSnapshot::new(DMatrix::from_element(1, 1, 0.3), vec![])
            .unwrap()
            .with_target(DVector::from_element(1, 1.1))
            .unwrap();
        let a = 1.7;
        let ll = log_likelihood(&DMatrix::from_element(1, 1, a), &[], &snap).unwrap();
        let var: f64 = 1.0 / (2.0 * a);
        let oracle = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (1.1f64 - 0.3).powi(2) / (2.0 * var);
        assert!((ll - oracle).abs() < 1e-12);
    }

    #[test]
    fn likelihood_at_mean_is_normalizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (alpha, beta, snap) = random_instance(&mut rng, 6, 2, 1);
        let p = posterior(
            &assemble_precision(&alpha, &beta, &snap).unwrap(),
            &assemble_b(&alpha, &snap).unwrap(),
        )
        .unwrap();
        let at_mean = snap.clone().with_target(p.mu.clone()).unwrap();
        let ll = log_likelihood(&alpha, &beta, &at_mean).unwrap();
        let oracle = 0.5 * p.log_det_q - 3.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((ll - oracle).abs() < 1e-10);
        let dir = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let mut prev = ll;
        for step in 1..5 {
            let moved = snap.clone().with_target(&p.mu + &dir * step as f64 * 0.1).unwrap();
            let v = log_likelihood(&alpha, &beta, &moved).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    fn finite_difference_check(params: &GcrfParams, snap: &GcrfSnapshot, tol: f64) {
        let (_, du, dv) = params.gradient(snap).unwrap();
        let h = 1e-6;
        let analytic: Vec<f64> = du.iter().chain(&dv).copied().collect();
        for (idx, g) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            if idx < params.u.len() {
                plus.u[idx] += h;
                minus.u[idx] -= h;
            } else {
                plus.v[idx - params.u.len()] += h;
                minus.v[idx - params.u.len()] -= h;
            }
            let fd = (plus.log_likelihood(snap).unwrap() - minus.log_likelihood(snap).unwrap()) / (2.0 * h);
            let err = (g - fd).abs() / g.abs().max(1.0);
            assert!(err < tol, "component {idx}: analytic {g} vs fd {fd}");
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [AlphaMode::Shared, AlphaMode::PerNode] {
            let (_, _, snap) = random_instance(&mut rng, 6, 2, 1);
            let mut params = GcrfParams::init(mode, 2, 6, 1);
            for u in &mut params.u {
                *u = rng.random_range(-1.0..1.0);
            }
            params.v[0] = rng.random_range(-1.0..1.0);
            finite_difference_check(&params, &snap, 1e-5);
        }
    }

    #[test]
    fn disconnected_graph_has_zero_beta_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, _, snap) = random_instance(&mut rng, 5, 1, 0);
        let snap = GcrfSnapshot {
            similarities: vec![SimilarityMatrix::empty(5, SimilarityKind::Given)],
            ..snap
        };
        let (_, _, dv) = GcrfParams::init(AlphaMode::PerNode, 1, 5, 1).gradient(&snap).unwrap();
        assert_eq!(dv, vec![0.0]);
    }

    #[test]
    fn symmetric_nodes_get_identical_gradients() {
        let snap = GcrfSnapshot::new(DMatrix::from_row_slice(1, 2, &[0.4, 0.4]), vec![sim(2, &[(0, 1, 0.7)])])
            .unwrap()
            .with_target(DVector::from_vec(vec![0.9, 0.9]))
            .unwrap();
        let (_, du, _) = GcrfParams::init(AlphaMode::PerNode, 1, 2, 1).gradient(&snap).unwrap();
        assert!((du[0] - du[1]).abs() < 1e-14);
    }

    #[test]
    fn common_scaling_leaves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (alpha, beta, snap) = random_instance(&mut rng, 7, 2, 2);
        let c = 3.5;
        let p1 = posterior(&assemble_precision(&alpha, &beta, &snap).unwrap(), &assemble_b(&alpha, &snap).unwrap()).unwrap();
        let a2 = &alpha * c;
        let b2: Vec<f64> = beta.iter().map(|b| b * c).collect();
        let p2 = posterior(&assemble_precision(&a2, &b2, &snap).unwrap(), &assemble_b(&a2, &snap).unwrap()).unwrap();
        for i in 0..7 {
            assert!((p1.mu[i] - p2.mu[i]).abs() < 1e-12);
            assert!((p1.var_diag[i] / c - p2.var_diag[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn serialization_round_trip() {
        let mut p = GcrfParams::init(AlphaMode::PerNode, 2, 3, 1);
        p.u = vec![0.1, -0.2, 0.3, 1.0 / 3.0, 2.0, -7.5];
        p.v = vec![0.25];
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with(GCRF_FORMAT));
        assert_eq!(GcrfParams::read(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn shape_mismatches_rejected() {
        let snap = GcrfSnapshot::new(DMatrix::zeros(2, 3), vec![]).unwrap();
        assert!(GcrfParams::init(AlphaMode::Shared, 1, 3, 0).predict(&snap).is_err());
        assert!(GcrfParams::init(AlphaMode::PerNode, 2, 4, 0).predict(&snap).is_err());
        assert!(GcrfParams::init(AlphaMode::Shared, 2, 3, 1).predict(&snap).is_err());
        assert!(matches!(
            GcrfParams::init(AlphaMode::Shared, 2, 3, 0).log_likelihood(&snap),
            Err(Error::MissingChannel("target"))
        ));
    }

    #[test]
    fn sparse_route_agrees_with_dense() {
        let n = 600;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let edges: Vec<(usize, usize, f64)> = (0..n - 1).map(|i| (i, i + 1, rng.random_range(0.1..1.0))).collect();
        let snap = GcrfSnapshot::new(DMatrix::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0)), vec![sim(n, &edges)])
            .unwrap()
            .with_target(DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
            .unwrap();
        let params = GcrfParams::init(AlphaMode::Shared, 1, n, 1);
        let q = params.precision(&snap).unwrap();
        let b = params.b(&snap).unwrap();
        let sparse = posterior(&q, &b).unwrap();
        let dense = SpdFactor::dense(&q).unwrap();
        let mu = dense.solve(&b);
        let var = dense.inverse_diagonal();
        for i in 0..n {
            assert!((sparse.mu[i] - mu[i]).abs() < 1e-10);
            assert!((sparse.var_diag[i] - var[i]).abs() < 1e-10);
        }
        assert!((sparse.log_det_q - dense.log_det()).abs() < 1e-8);
    }
}
