use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Predictor;
use crate::dataset::LagFeatureMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "LR")]
    Linear,
    #[serde(rename = "GP")]
    Gp,
}

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::Linear => "LR",
            Family::Gp => "GP",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lr" | "linear" => Ok(Family::Linear),
            "gp" => Ok(Family::Gp),
            other => Err(Error::Parse(format!("unknown predictor family {other}"))),
        }
    }
}

/// A fitted candidate summarized by its validation error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub family: Family,
    pub lag: usize,
    pub rmse: f64,
}

/// RMSE of a predictor's means over a validation design.
pub fn validation_rmse<P: Predictor + ?Sized>(
    model: &P,
    validation: &LagFeatureMatrix,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::InvalidInput("empty validation window".into()));
    }
    let mut sse = 0.0;
    for (x, y) in validation.features.iter().zip(&validation.labels) {
        let p = model.predict(x)?;
        sse += (p.mean - y).powi(2);
    }
    Ok((sse / validation.len() as f64).sqrt())
}

/// Lowest-RMSE candidate of each family; ties go to the smaller lag.
pub fn select_best_predictor(
    candidates: &[ScoredCandidate],
) -> Result<BTreeMap<Family, ScoredCandidate>> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidates to select from".into()));
    }
    let mut best: BTreeMap<Family, ScoredCandidate> = BTreeMap::new();
    for c in candidates {
        if !c.rmse.is_finite() {
            return Err(Error::InvalidInput(format!(
                "{} lag{} has non-finite validation RMSE",
                c.family.label(),
                c.lag
            )));
        }
        best.entry(c.family)
            .and_modify(|b| {
                if c.rmse < b.rmse || (c.rmse == b.rmse && c.lag < b.lag) {
                    *b = *c;
                }
            })
            .or_insert(*c);
    }
    Ok(best)
}
