use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::PredictiveDistribution;
use crate::dataset::LagFeatureMatrix;
use crate::error::{Error, Result};

/// Normal equations with a condition estimate above this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Ordinary least squares AR model. Weights are stored as
/// `[w_lag1, ..., w_lagk, intercept]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearArModel {
    pub weights: DVector<f64>,
    pub sigma_y2: f64,
    pub xtx_inv: DMatrix<f64>,
    pub n_train: usize,
    pub n_features: usize,
}

fn augment(x: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.len() + 1, x.iter().copied().chain(std::iter::once(1.0)))
}

pub fn fit_linear_ar(features: &LagFeatureMatrix) -> Result<LinearArModel> {
    let n = features.len();
    let k = features.features.first().map_or(0, Vec::len);
    if n <= k + 1 {
        return Err(Error::InsufficientSamples {
            needed: k + 2,
            available: n,
        });
    }
    let x = DMatrix::from_fn(n, k + 1, |r, c| {
        if c < k {
            features.features[r][c]
        } else {
            1.0
        }
    });
    let y = DVector::from_column_slice(&features.labels);
    let xtx = x.transpose() * &x;
    let eig = SymmetricEigen::new(xtx.clone());
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    let mut xtx_inv = xtx
        .try_inverse()
        .ok_or(Error::IllConditioned { condition })?;
    // symmetrize against round-off
    xtx_inv = (&xtx_inv + xtx_inv.transpose()) * 0.5;
    let weights = &xtx_inv * (x.transpose() * &y);
    let resid = &y - &x * &weights;
    let sigma_y2 = resid.norm_squared() / (n - k - 1) as f64;
    Ok(LinearArModel {
        weights,
        sigma_y2,
        xtx_inv,
        n_train: n,
        n_features: k,
    })
}

impl LinearArModel {
    /// `mean = w^T x`, `variance = sigma_y2 (1 + x (X^T X)^-1 x^T)`.
    pub fn predict(&self, x: &[f64]) -> Result<PredictiveDistribution> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        let xa = augment(x);
        let mean = self.weights.dot(&xa);
        let leverage = xa.dot(&(&self.xtx_inv * &xa));
        Ok(PredictiveDistribution::new(mean, self.sigma_y2 * (1.0 + leverage)))
    }
}
