//! Uncertainty-aware GCRF variants and a common interface over all three
//! structured models.
//!
//! uGCRF divides each association weight by the base predictor's own
//! predictive variance and multiplies it by a coverage-quality index. ufGCRF
//! makes the weight an exponentiated neural function of node features.

mod nn;
mod ufgcrf;
mod ugcrf;

pub use nn::Mlp;
pub use ufgcrf::{train_ufgcrf, UfgcrfOptimizer, UfgcrfParams, UfgcrfTrainConfig};
pub use ugcrf::{compute_ci_index, coverage_index, train_ugcrf, ugcrf_alpha, UgcrfParams, CI_FLOOR};

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gcrf::{GcrfParams, GcrfPosterior, GcrfSnapshot};
use crate::predictors::PredictiveDistribution;
use crate::textfmt::Record;

pub const MODEL_FORMAT: &str = "tgcrf-model 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StructuredKind {
    Gcrf,
    Ugcrf,
    Ufgcrf,
}

impl StructuredKind {
    pub fn label(self) -> &'static str {
        match self {
            StructuredKind::Gcrf => "GCRF",
            StructuredKind::Ugcrf => "uGCRF",
            StructuredKind::Ufgcrf => "ufGCRF",
        }
    }
}

impl fmt::Display for StructuredKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructuredKind::Gcrf => "gcrf",
            StructuredKind::Ugcrf => "ugcrf",
            StructuredKind::Ufgcrf => "ufgcrf",
        })
    }
}

impl FromStr for StructuredKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gcrf" => Ok(StructuredKind::Gcrf),
            "ugcrf" => Ok(StructuredKind::Ugcrf),
            "ufgcrf" => Ok(StructuredKind::Ufgcrf),
            other => Err(Error::Parse(format!("unknown structured model {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StructuredModel {
    Gcrf(GcrfParams),
    Ugcrf(UgcrfParams),
    Ufgcrf(UfgcrfParams),
}

impl StructuredModel {
    pub fn kind(&self) -> StructuredKind {
        match self {
            StructuredModel::Gcrf(_) => StructuredKind::Gcrf,
            StructuredModel::Ugcrf(_) => StructuredKind::Ugcrf,
            StructuredModel::Ufgcrf(_) => StructuredKind::Ufgcrf,
        }
    }

    /// Association weights this model uses on `snapshot`.
    pub fn alpha(&self, snapshot: &GcrfSnapshot) -> Result<DMatrix<f64>> {
        match self {
            StructuredModel::Gcrf(p) => p.alpha(snapshot.n()),
            StructuredModel::Ugcrf(p) => p.alpha(snapshot),
            StructuredModel::Ufgcrf(p) => p.alpha(snapshot),
        }
    }

    pub fn posterior(&self, snapshot: &GcrfSnapshot) -> Result<GcrfPosterior> {
        match self {
            StructuredModel::Gcrf(p) => p.predict(snapshot),
            StructuredModel::Ugcrf(p) => p.predict(snapshot),
            StructuredModel::Ufgcrf(p) => p.predict(snapshot),
        }
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut rec = Record::default();
        rec.push("model", self.kind());
        match self {
            StructuredModel::Gcrf(p) => p.write_fields(&mut rec),
            StructuredModel::Ugcrf(p) => p.write_fields(&mut rec),
            StructuredModel::Ufgcrf(p) => p.write_fields(&mut rec),
        }
        rec.write(MODEL_FORMAT, w)
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let rec = Record::read(MODEL_FORMAT, r)?;
        Ok(match rec.parse::<StructuredKind>("model")? {
            StructuredKind::Gcrf => StructuredModel::Gcrf(GcrfParams::read_fields(&rec)?),
            StructuredKind::Ugcrf => StructuredModel::Ugcrf(UgcrfParams::read_fields(&rec)?),
            StructuredKind::Ufgcrf => StructuredModel::Ufgcrf(UfgcrfParams::read_fields(&rec)?),
        })
    }
}

/// Per-node predictive distributions from any structured model.
pub fn predict_structured(model: &StructuredModel, snapshot: &GcrfSnapshot) -> Result<Vec<PredictiveDistribution>> {
    let p = model.posterior(snapshot)?;
    Ok(p.mu
        .iter()
        .zip(p.var_diag.iter())
        .map(|(m, v)| PredictiveDistribution::new(*m, *v))
        .collect())
}
