//! Autoregressive base predictors that report a predictive variance.

mod gp;
mod linear;
mod select;

pub use gp::{fit_gp, GpModel, GpSearch, LengthScaleMode};
pub use linear::{fit_linear_ar, LinearArModel, MAX_CONDITION};
pub use select::{select_best_predictor, validation_rmse, Family, ScoredCandidate};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Lower bound applied to every predictive variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Gaussian predictive density for one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: f64,
    pub variance: f64,
}

impl PredictiveDistribution {
    /// Applies [`VARIANCE_FLOOR`].
    pub fn new(mean: f64, variance: f64) -> Self {
        Self {
            mean,
            variance: floor_variance(variance),
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

pub fn floor_variance(v: f64) -> f64 {
    if v.is_nan() {
        VARIANCE_FLOOR
    } else {
        v.max(VARIANCE_FLOOR)
    }
}

/// Anything that maps a lag vector to a predictive density.
pub trait Predictor {
    fn n_features(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<PredictiveDistribution>;
}

impl Predictor for LinearArModel {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict(&self, x: &[f64]) -> Result<PredictiveDistribution> {
        self.predict(x)
    }
}

impl Predictor for GpModel {
    fn n_features(&self) -> usize {
        self.n_features()
    }

    fn predict(&self, x: &[f64]) -> Result<PredictiveDistribution> {
        self.predict(x)
    }
}
