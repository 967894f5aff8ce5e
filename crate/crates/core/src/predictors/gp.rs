use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::PredictiveDistribution;
use crate::dataset::LagFeatureMatrix;
use crate::error::{Error, Result};
use crate::linalg::cholesky_with_jitter;
use crate::optim::{minimize, LbfgsConfig};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthScaleMode {
    Shared,
    /// One length scale per input dimension, refined by gradient ascent
    /// from the shared grid optimum.
    PerDimension,
}

/// Hyperparameter search. Ranges are multiples of data-derived scales: the
/// target variance for noise and amplitude, the mean input standard
/// deviation for length scales. Grids are log-spaced and inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct GpSearch {
    pub noise_points: usize,
    pub amplitude_points: usize,
    pub length_points: usize,
    pub noise_range: (f64, f64),
    pub amplitude_range: (f64, f64),
    pub length_range: (f64, f64),
    pub mode: LengthScaleMode,
    /// Gradient refinement after the grid (always on in per-dimension mode).
    pub refine: bool,
}

impl Default for GpSearch {
    fn default() -> Self {
        Self {
            noise_points: 8,
            amplitude_points: 8,
            length_points: 8,
            noise_range: (1e-3, 1.0),
            amplitude_range: (0.1, 10.0),
            length_range: (0.1, 10.0),
            mode: LengthScaleMode::Shared,
            refine: false,
        }
    }
}

pub(crate) fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Data-derived grids `(noise, amplitude, length)` for a design.
pub(crate) fn search_grids(
    x: &[Vec<f64>],
    y_centered: &[f64],
    search: &GpSearch,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = y_centered.len() as f64;
    let mut v = y_centered.iter().map(|y| y * y).sum::<f64>() / n;
    if !(v > 1e-12) {
        v = 1e-12;
    }
    let d = x[0].len();
    let mut spread = 0.0;
    for c in 0..d {
        let mean = x.iter().map(|r| r[c]).sum::<f64>() / n;
        spread += (x.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n).sqrt();
    }
    spread /= d.max(1) as f64;
    if !(spread > 1e-12) {
        spread = 1.0;
    }
    (
        log_grid(v * search.noise_range.0, v * search.noise_range.1, search.noise_points),
        log_grid(
            v * search.amplitude_range.0,
            v * search.amplitude_range.1,
            search.amplitude_points,
        ),
        log_grid(
            spread * search.length_range.0,
            spread * search.length_range.1,
            search.length_points,
        ),
    )
}

/// Zero-mean GP on centered targets with a Gaussian kernel
/// `k(x, x') = amplitude * exp(-1/2 sum_d (x_d - x'_d)^2 / w_d^2)`.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub x_train: Vec<Vec<f64>>,
    /// Centered targets.
    pub y_train: DVector<f64>,
    pub y_mean: f64,
    pub sigma_y2: f64,
    pub kernel_amplitude: f64,
    pub length_scales: Vec<f64>,
    /// Jitter that had to be added to `C` for the factorization.
    pub jitter: f64,
    c_chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
}

/// `exp(-1/2 sum (a-b)^2 / w^2)` without the amplitude.
fn unit_kernel(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(w)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    (-0.5 * r2).exp()
}

fn covariance(x: &[Vec<f64>], noise: f64, amplitude: f64, w: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| {
        amplitude * unit_kernel(&x[i], &x[j], w) + if i == j { noise } else { 0.0 }
    })
}

/// Log marginal likelihood and its gradient with respect to
/// `(ln noise, ln amplitude, ln w_1..ln w_D)`.
fn log_marginal(
    x: &[Vec<f64>],
    y: &DVector<f64>,
    noise: f64,
    amplitude: f64,
    w: &[f64],
    with_gradient: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = x.len();
    let c = covariance(x, noise, amplitude, w);
    let (chol, _) = cholesky_with_jitter(&c, JITTER_START, JITTER_MAX)?;
    let alpha = chol.solve(y);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !with_gradient {
        return Ok((lml, Vec::new()));
    }
    // d lml / d theta = 1/2 tr((a a^T - C^-1) dC/dtheta)
    let c_inv = chol.inverse();
    let inner = &alpha * alpha.transpose() - c_inv;
    let mut grad = vec![0.0; 2 + w.len()];
    grad[0] = 0.5 * noise * inner.trace();
    for i in 0..n {
        for j in 0..n {
            let k = amplitude * unit_kernel(&x[i], &x[j], w);
            grad[1] += 0.5 * inner[(i, j)] * k;
            for (d, wd) in w.iter().enumerate() {
                let delta = x[i][d] - x[j][d];
                grad[2 + d] += 0.5 * inner[(i, j)] * k * delta * delta / (wd * wd);
            }
        }
    }
    Ok((lml, grad))
}

/// Grid search (then optional refinement) of the log marginal likelihood.
pub fn fit_gp(features: &LagFeatureMatrix, search: &GpSearch) -> Result<GpModel> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            available: n,
        });
    }
    let x = &features.features;
    let d = x[0].len();
    let y_mean = features.labels.iter().sum::<f64>() / n as f64;
    let y: Vec<f64> = features.labels.iter().map(|v| v - y_mean).collect();
    let y_vec = DVector::from_column_slice(&y);
    let (noise_grid, amp_grid, len_grid) = search_grids(x, &y, search);

    let mut best: Option<(f64, f64, f64, f64)> = None;
    for &len in &len_grid {
        let w = vec![len; d];
        let unit = covariance(x, 0.0, 1.0, &w);
        for &amp in &amp_grid {
            for &noise in &noise_grid {
                let mut c = &unit * amp;
                for i in 0..n {
                    c[(i, i)] += noise;
                }
                let Ok((chol, _)) = cholesky_with_jitter(&c, JITTER_START, JITTER_MAX) else {
                    continue;
                };
                let alpha = chol.solve(&y_vec);
                let log_det: f64 =
                    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let lml = -0.5 * y_vec.dot(&alpha) - 0.5 * log_det;
                if best.is_none_or(|b| lml > b.0) {
                    best = Some((lml, noise, amp, len));
                }
            }
        }
    }
    let (_, mut noise, mut amp, len) = best.ok_or(Error::Factorization { min_pivot: f64::NAN })?;
    let mut w = vec![len; d];

    if search.refine || search.mode == LengthScaleMode::PerDimension {
        let per_dim = search.mode == LengthScaleMode::PerDimension;
        let unpack = |t: &[f64]| -> (f64, f64, Vec<f64>) {
            let ws = if per_dim {
                t[2..].iter().map(|v| v.exp()).collect()
            } else {
                vec![t[2].exp(); d]
            };
            (t[0].exp(), t[1].exp(), ws)
        };
        let mut start = vec![noise.ln(), amp.ln()];
        if per_dim {
            start.extend(w.iter().map(|v| v.ln()));
        } else {
            start.push(len.ln());
        }
        let objective = |t: &[f64]| {
            if t.iter().any(|v| !v.is_finite() || v.abs() > 50.0) {
                return Err(Error::InvalidInput("hyperparameter out of range".into()));
            }
            let (nz, a, ws) = unpack(t);
            let (lml, g) = log_marginal(x, &y_vec, nz, a, &ws, true)?;
            let mut grad = vec![-g[0], -g[1]];
            if per_dim {
                grad.extend(g[2..].iter().map(|v| -v));
            } else {
                grad.push(-g[2..].iter().sum::<f64>());
            }
            Ok((-lml, grad))
        };
        let cfg = LbfgsConfig {
            max_iterations: 100,
            gradient_tolerance: 1e-6,
            ..Default::default()
        };
        let found = minimize(objective, &start, &cfg)?;
        let (nz, a, ws) = unpack(&found.x);
        noise = nz;
        amp = a;
        w = ws;
    }
    GpModel::with_hyperparameters(features, noise, amp, w)
}

impl GpModel {
    /// Condition a GP with fixed hyperparameters on the design.
    pub fn with_hyperparameters(
        features: &LagFeatureMatrix,
        sigma_y2: f64,
        kernel_amplitude: f64,
        length_scales: Vec<f64>,
    ) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                available: n,
            });
        }
        let d = features.features[0].len();
        if length_scales.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: length_scales.len(),
            });
        }
        if length_scales.iter().any(|w| !(*w > 0.0)) || !(sigma_y2 >= 0.0) || !(kernel_amplitude > 0.0) {
            return Err(Error::InvalidInput("GP hyperparameters must be positive".into()));
        }
        let y_mean = features.labels.iter().sum::<f64>() / n as f64;
        let y_train = DVector::from_iterator(n, features.labels.iter().map(|v| v - y_mean));
        let c = covariance(&features.features, sigma_y2, kernel_amplitude, &length_scales);
        let (c_chol, jitter) = cholesky_with_jitter(&c, JITTER_START, JITTER_MAX)?;
        let weights = c_chol.solve(&y_train);
        Ok(Self {
            x_train: features.features.clone(),
            y_train,
            y_mean,
            sigma_y2,
            kernel_amplitude,
            length_scales,
            jitter,
            c_chol,
            weights,
        })
    }

    pub fn n_features(&self) -> usize {
        self.length_scales.len()
    }

    /// Log marginal likelihood of the training targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.y_train.len() as f64;
        let log_det: f64 = 2.0 * self.c_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * self.y_train.dot(&self.weights) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Prior variance of a noisy observation, `c* = amplitude + sigma_y2`.
    pub fn prior_variance(&self) -> f64 {
        self.kernel_amplitude + self.sigma_y2
    }

    /// `mu* = k*^T C^-1 y`, `sigma*^2 = c* - k*^T C^-1 k*`.
    pub fn predict(&self, x: &[f64]) -> Result<PredictiveDistribution> {
        if x.len() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                got: x.len(),
            });
        }
        let k_star = DVector::from_iterator(
            self.x_train.len(),
            self.x_train
                .iter()
                .map(|xi| self.kernel_amplitude * unit_kernel(xi, x, &self.length_scales)),
        );
        let mean = k_star.dot(&self.weights) + self.y_mean;
        let v = self
            .c_chol
            .l_dirty()
            .lower_triangle()
            .solve_lower_triangular(&k_star)
            .unwrap_or_else(|| DVector::zeros(k_star.len()));
        let variance = self.prior_variance() - v.norm_squared();
        Ok(PredictiveDistribution::new(mean, variance))
    }
}
