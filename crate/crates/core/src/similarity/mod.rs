//! Node-similarity graphs and the variogram check of their usefulness.

mod builders;
mod variogram;

pub use builders::{
    common_history_similarity, comorbidity_similarity, histograms_from_attribute,
    js_divergence, js_divergence_similarity, sparsify, CoMeasure, HistoryVariant,
    SparsifyRule, UnknownCodePolicy, JSD_MIN,
};
pub use variogram::{spearman, variogram, Verdict, VariogramBin, VariogramConfig, VariogramReport};

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const TRIPLET_FORMAT: &str = "tgcrf-similarity 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimilarityKind {
    Comorbidity,
    JsDivergence,
    CommonHistory,
    /// Supplied externally, e.g. a generator's ground-truth graph.
    Given,
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityKind::Comorbidity => "comorbidity",
            SimilarityKind::JsDivergence => "js-divergence",
            SimilarityKind::CommonHistory => "common-history",
            SimilarityKind::Given => "given",
        })
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "comorbidity" => Ok(SimilarityKind::Comorbidity),
            "js-divergence" | "jsd" => Ok(SimilarityKind::JsDivergence),
            "common-history" | "history" => Ok(SimilarityKind::CommonHistory),
            "given" => Ok(SimilarityKind::Given),
            other => Err(Error::Parse(format!("unknown similarity kind {other}"))),
        }
    }
}

/// Symmetric nonnegative edge weights with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: DMatrix<f64>,
    kind: SimilarityKind,
    timestep: Option<i64>,
}

impl SimilarityMatrix {
    /// Validates symmetry (1e-12) and nonnegativity; the diagonal is zeroed.
    pub fn new(mut values: DMatrix<f64>, kind: SimilarityKind, timestep: Option<i64>) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::InvalidInput("similarity matrix must be square".into()));
        }
        for i in 0..n {
            values[(i, i)] = 0.0;
            for j in 0..i {
                let (a, b) = (values[(i, j)], values[(j, i)]);
                if !a.is_finite() || a < 0.0 || b < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "similarity ({i},{j}) must be finite and nonnegative"
                    )));
                }
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidInput(format!("similarity not symmetric at ({i},{j})")));
                }
                let m = 0.5 * (a + b);
                values[(i, j)] = m;
                values[(j, i)] = m;
            }
        }
        Ok(Self { values, kind, timestep })
    }

    pub fn empty(n: usize, kind: SimilarityKind) -> Self {
        Self {
            values: DMatrix::zeros(n, n),
            kind,
            timestep: None,
        }
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn timestep(&self) -> Option<i64> {
        self.timestep
    }

    pub fn with_timestep(mut self, t: Option<i64>) -> Self {
        self.timestep = t;
        self
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Edges `(i, j, s)` with `i < j` and `s > 0`, row-major.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let s = self.values[(i, j)];
                if s > 0.0 {
                    out.push((i, j, s));
                }
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: &self.values * factor,
            ..self.clone()
        }
    }

    /// Sparse triplet text: version line, `kind`, `n`, `timestep` header
    /// lines, then `i j s_ij` with `i < j` for each edge.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("similarity sink", e);
        writeln!(w, "{TRIPLET_FORMAT}").map_err(io)?;
        writeln!(w, "kind {}", self.kind).map_err(io)?;
        writeln!(w, "n {}", self.n()).map_err(io)?;
        match self.timestep {
            Some(t) => writeln!(w, "timestep {t}").map_err(io)?,
            None => writeln!(w, "timestep -").map_err(io)?,
        }
        for (i, j, s) in self.edges() {
            writeln!(w, "{i} {j} {s}").map_err(io)?;
        }
        Ok(())
    }

    pub fn read_triplets<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("truncated similarity file".into()))?
                .map_err(|e| Error::io("similarity source", e))
        };
        let version = next()?;
        if version.trim() != TRIPLET_FORMAT {
            return Err(Error::Parse(format!("unsupported similarity format {version:?}")));
        }
        let header = |line: String, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| Error::Parse(format!("expected {key} header, got {line:?}")))
        };
        let kind: SimilarityKind = header(next()?, "kind")?.parse()?;
        let n: usize = header(next()?, "n")?
            .parse()
            .map_err(|_| Error::Parse("bad n".into()))?;
        let ts = header(next()?, "timestep")?;
        let timestep = if ts == "-" {
            None
        } else {
            Some(ts.parse().map_err(|_| Error::Parse("bad timestep".into()))?)
        };
        let mut values = DMatrix::zeros(n, n);
        for line in lines {
            let line = line.map_err(|e| Error::io("similarity source", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse(format!("bad triplet {line:?}"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let i: usize = parts[0].parse().map_err(|_| bad())?;
            let j: usize = parts[1].parse().map_err(|_| bad())?;
            let s: f64 = parts[2].parse().map_err(|_| bad())?;
            if i >= j || j >= n {
                return Err(bad());
            }
            values[(i, j)] = s;
            values[(j, i)] = s;
        }
        Self::new(values, kind, timestep)
    }
}
