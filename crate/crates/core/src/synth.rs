//! Seeded generators of evolving-graph forecasting datasets.
//!
//! Nodes are split into contiguous communities. Each node's deviation from
//! its community level follows a graph vector autoregression
//!
//! `x_t = ar1 * x_{t-1} + homophily * W x_{t-1} + seasonal_t + e_t`
//!
//! where `W` averages over graph neighbours. The noise variance can differ
//! per node and can switch up while an observed `regime` attribute sits
//! above a threshold. All randomness comes from ChaCha20 seeded with the
//! config's `seed`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::TemporalGraphDataset;
use crate::error::{Error, Result};
use crate::gcrf::{assemble_b, assemble_precision, GcrfSnapshot};
use crate::kvfile::{KvFile, KvWriter};
use crate::similarity::{SimilarityKind, SimilarityMatrix};

pub const SYNTH_FORMAT: &str = "tgcrf-synth 1";
pub const RNG_NAME: &str = "chacha20";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseLevels {
    /// A `high_share` fraction of nodes, spread evenly over the index range,
    /// gets the maximum; the rest get the minimum.
    Two,
    LogUniform,
}

impl fmt::Display for NoiseLevels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseLevels::Two => "two",
            NoiseLevels::LogUniform => "log-uniform",
        })
    }
}

impl FromStr for NoiseLevels {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two" => Ok(NoiseLevels::Two),
            "log-uniform" => Ok(NoiseLevels::LogUniform),
            other => Err(Error::Parse(format!("unknown noise levels {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseProfile {
    Homoscedastic { variance: f64 },
    Heteroscedastic {
        min: f64,
        max: f64,
        levels: NoiseLevels,
        /// Only used by [`NoiseLevels::Two`].
        high_share: f64,
    },
}

/// Noise variance is multiplied by `factor` at `t` when the node's regime
/// attribute at `t - 1` exceeds `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeSwitch {
    pub threshold: f64,
    pub factor: f64,
    /// AR(1) coefficient of the unit-variance regime process.
    pub persistence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub n_timesteps: usize,
    pub seed: u64,
    pub communities: usize,
    /// Edge probability within a community.
    pub edge_prob: f64,
    /// Edge probability across communities.
    pub cross_edge_prob: f64,
    pub homophily: f64,
    pub ar1: f64,
    /// Distance between consecutive community levels.
    pub community_spread: f64,
    /// Variance of an innovation shared by every member of a community.
    pub community_noise_var: f64,
    pub seasonal_amplitude: f64,
    pub seasonal_period: f64,
    pub noise: NoiseProfile,
    pub regime: Option<RegimeSwitch>,
    pub burn_in: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nodes: 50,
            n_timesteps: 120,
            seed: 0,
            communities: 2,
            edge_prob: 1.0,
            cross_edge_prob: 0.0,
            homophily: 0.5,
            ar1: 0.4,
            community_spread: 0.0,
            community_noise_var: 0.0,
            seasonal_amplitude: 0.0,
            seasonal_period: 12.0,
            noise: NoiseProfile::Homoscedastic { variance: 1.0 },
            regime: None,
            burn_in: 100,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.n_nodes == 0 || self.n_timesteps == 0 {
            return bad("n_nodes and n_timesteps must be positive");
        }
        if self.communities == 0 || self.communities > self.n_nodes {
            return bad("communities must lie in 1..=n_nodes");
        }
        if !(self.ar1.abs() < 1.0) {
            return bad("ar1 must lie in (-1, 1)");
        }
        if !(self.homophily >= 0.0) || !self.homophily.is_finite() {
            return bad("homophily must be nonnegative");
        }
        if !(self.community_noise_var >= 0.0) || !self.community_noise_var.is_finite() {
            return bad("community_noise_var must be nonnegative");
        }
        for p in [self.edge_prob, self.cross_edge_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("edge probabilities must lie in [0, 1]");
            }
        }
        if !(self.seasonal_period > 0.0) {
            return bad("seasonal_period must be positive");
        }
        match self.noise {
            NoiseProfile::Homoscedastic { variance } if !(variance > 0.0) => {
                return bad("noise variance must be positive")
            }
            NoiseProfile::Heteroscedastic { min, max, .. } if !(min > 0.0 && max >= min) => {
                return bad("need 0 < noise_var_min <= noise_var_max")
            }
            NoiseProfile::Heteroscedastic { high_share, .. } if !(high_share > 0.0 && high_share <= 1.0) => {
                return bad("noise_high_share must lie in (0, 1]")
            }
            _ => {}
        }
        if let Some(r) = self.regime {
            if !(r.factor > 0.0) || !(r.persistence.abs() < 1.0) {
                return bad("regime factor must be positive and persistence in (-1, 1)");
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        if let Some(f) = kv.take("format") {
            if f != SYNTH_FORMAT {
                return Err(Error::Parse(format!("unsupported format {f}")));
            }
        }
        let rng = kv.take("rng").unwrap_or_else(|| RNG_NAME.to_string());
        if rng != RNG_NAME {
            return Err(Error::Parse(format!("unsupported rng {rng}; only {RNG_NAME}")));
        }
        let d = Self::default();
        let noise = match kv.take("noise").as_deref() {
            None | Some("homoscedastic") => NoiseProfile::Homoscedastic {
                variance: kv.take_or("noise_var", 1.0)?,
            },
            Some("heteroscedastic") => NoiseProfile::Heteroscedastic {
                min: kv.take_or("noise_var_min", 0.1)?,
                max: kv.take_or("noise_var_max", 1.0)?,
                levels: kv.take_or("noise_levels", NoiseLevels::Two)?,
                high_share: kv.take_or("noise_high_share", 0.5)?,
            },
            Some(other) => return Err(Error::Parse(format!("unknown noise profile {other}"))),
        };
        let regime = match kv.take_parse::<f64>("regime_threshold")? {
            Some(threshold) => Some(RegimeSwitch {
                threshold,
                factor: kv.take_or("regime_factor", 4.0)?,
                persistence: kv.take_or("regime_persistence", 0.8)?,
            }),
            None => None,
        };
        let cfg = Self {
            n_nodes: kv.take_or("n_nodes", d.n_nodes)?,
            n_timesteps: kv.take_or("n_timesteps", d.n_timesteps)?,
            seed: kv.take_or("seed", d.seed)?,
            communities: kv.take_or("communities", d.communities)?,
            edge_prob: kv.take_or("edge_prob", d.edge_prob)?,
            cross_edge_prob: kv.take_or("cross_edge_prob", d.cross_edge_prob)?,
            homophily: kv.take_or("homophily", d.homophily)?,
            ar1: kv.take_or("ar1", d.ar1)?,
            community_spread: kv.take_or("community_spread", d.community_spread)?,
            community_noise_var: kv.take_or("community_noise_var", d.community_noise_var)?,
            seasonal_amplitude: kv.take_or("seasonal_amplitude", d.seasonal_amplitude)?,
            seasonal_period: kv.take_or("seasonal_period", d.seasonal_period)?,
            noise,
            regime,
            burn_in: kv.take_or("burn_in", d.burn_in)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Canonical key-value form; `parse` reads it back unchanged.
    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::default();
        w.put("format", SYNTH_FORMAT)
            .put("rng", RNG_NAME)
            .put("n_nodes", self.n_nodes)
            .put("n_timesteps", self.n_timesteps)
            .put("seed", self.seed)
            .put("communities", self.communities)
            .put("edge_prob", self.edge_prob)
            .put("cross_edge_prob", self.cross_edge_prob)
            .put("homophily", self.homophily)
            .put("ar1", self.ar1)
            .put("community_spread", self.community_spread)
            .put("community_noise_var", self.community_noise_var)
            .put("seasonal_amplitude", self.seasonal_amplitude)
            .put("seasonal_period", self.seasonal_period)
            .put("burn_in", self.burn_in);
        match self.noise {
            NoiseProfile::Homoscedastic { variance } => {
                w.put("noise", "homoscedastic").put("noise_var", variance);
            }
            NoiseProfile::Heteroscedastic { min, max, levels, high_share } => {
                w.put("noise", "heteroscedastic")
                    .put("noise_var_min", min)
                    .put("noise_var_max", max)
                    .put("noise_levels", levels)
                    .put("noise_high_share", high_share);
            }
        }
        if let Some(r) = self.regime {
            w.put("regime_threshold", r.threshold)
                .put("regime_factor", r.factor)
                .put("regime_persistence", r.persistence);
        }
        w.finish()
    }

    pub fn community_of(&self, node: usize) -> usize {
        node * self.communities / self.n_nodes
    }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Spectral radius of `ar1 * I + homophily * W` for row-normalized `W`.
fn spectral_radius(adjacency: &DMatrix<f64>, ar1: f64, homophily: f64) -> f64 {
    let deg: Vec<f64> = adjacency.row_iter().map(|r| r.sum()).collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| if *d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    // D^-1/2 A D^-1/2 is symmetric and similar to D^-1 A on connected nodes.
    let sym = DMatrix::from_fn(adjacency.nrows(), adjacency.ncols(), |i, j| {
        adjacency[(i, j)] * inv_sqrt[i] * inv_sqrt[j]
    });
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|l| (ar1 + homophily * l).abs())
        .fold(ar1.abs(), f64::max)
}

/// Dataset with attributes `group_level` (community level plus the
/// community's mean deviation) and, with a regime switch, `regime`; and the
/// ground-truth coupling graph.
pub fn generate_ar_graph(cfg: &SynthConfig) -> Result<(TemporalGraphDataset, SimilarityMatrix)> {
    cfg.validate()?;
    let n = cfg.n_nodes;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut adjacency = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let p = if cfg.community_of(i) == cfg.community_of(j) {
                cfg.edge_prob
            } else {
                cfg.cross_edge_prob
            };
            if rng.random::<f64>() < p {
                adjacency[(i, j)] = 1.0;
                adjacency[(j, i)] = 1.0;
            }
        }
    }
    let radius = spectral_radius(&adjacency, cfg.ar1, cfg.homophily);
    if radius >= 1.0 {
        return Err(Error::Unstable(radius));
    }
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| adjacency[(i, j)] > 0.0).collect())
        .collect();
    let base_var: Vec<f64> = match cfg.noise {
        NoiseProfile::Homoscedastic { variance } => vec![variance; n],
        NoiseProfile::Heteroscedastic { min, max, levels, high_share } => match levels {
            NoiseLevels::Two => (0..n)
                .map(|i| {
                    let high = ((i + 1) as f64 * high_share).floor() > (i as f64 * high_share).floor();
                    if high { max } else { min }
                })
                .collect(),
            NoiseLevels::LogUniform => (0..n)
                .map(|_| rng.random_range(min.ln()..=max.ln()).exp())
                .collect(),
        },
    };
    let c = cfg.communities;
    let offsets: Vec<f64> = (0..c)
        .map(|k| cfg.community_spread * (k as f64 - (c as f64 - 1.0) / 2.0))
        .collect();
    let members: Vec<Vec<usize>> = (0..c).map(|k| (0..n).filter(|&i| cfg.community_of(i) == k).collect()).collect();

    let t_total = cfg.burn_in + cfg.n_timesteps;
    let mut x = vec![0.0; n];
    let mut regime = vec![0.0; n];
    if cfg.regime.is_some() {
        regime.iter_mut().for_each(|v| *v = gauss(&mut rng));
    }
    let mut targets = DMatrix::zeros(cfg.n_timesteps, n);
    let mut group = DMatrix::zeros(cfg.n_timesteps, n);
    let mut regime_attr = DMatrix::zeros(cfg.n_timesteps, n);
    for t in 0..t_total {
        let seasonal = cfg.seasonal_amplitude
            * (2.0 * std::f64::consts::PI * t as f64 / cfg.seasonal_period).sin();
        let shocks: Vec<f64> = if cfg.community_noise_var > 0.0 {
            let sd = cfg.community_noise_var.sqrt();
            (0..c).map(|_| sd * gauss(&mut rng)).collect()
        } else {
            vec![0.0; c]
        };
        let mut next = vec![0.0; n];
        for i in 0..n {
            let nb = &neighbours[i];
            let mean_nb = if nb.is_empty() {
                0.0
            } else {
                nb.iter().map(|&j| x[j]).sum::<f64>() / nb.len() as f64
            };
            let mut var = base_var[i];
            if let Some(r) = cfg.regime {
                if regime[i] > r.threshold {
                    var *= r.factor;
                }
            }
            next[i] = cfg.ar1 * x[i] + cfg.homophily * mean_nb + seasonal + shocks[cfg.community_of(i)] + var.sqrt() * gauss(&mut rng);
        }
        x = next;
        if let Some(r) = cfg.regime {
            let s = (1.0 - r.persistence * r.persistence).sqrt();
            for v in regime.iter_mut() {
                *v = r.persistence * *v + s * gauss(&mut rng);
            }
        }
        if t >= cfg.burn_in {
            let row = t - cfg.burn_in;
            for (k, m) in members.iter().enumerate() {
                let level = offsets[k] + m.iter().map(|&i| x[i]).sum::<f64>() / m.len() as f64;
                for &i in m {
                    targets[(row, i)] = offsets[k] + x[i];
                    group[(row, i)] = level;
                }
            }
            for i in 0..n {
                regime_attr[(row, i)] = regime[i];
            }
        }
    }
    let width = (n.max(2) - 1).to_string().len();
    let node_ids = (0..n).map(|i| format!("n{i:0width$}")).collect();
    let timesteps = (1..=cfg.n_timesteps as i64).collect();
    let mut attributes = vec![("group_level".to_string(), group)];
    if cfg.regime.is_some() {
        attributes.push(("regime".to_string(), regime_attr));
    }
    let dataset = TemporalGraphDataset::from_dense(node_ids, timesteps, targets, attributes)?;
    let truth = SimilarityMatrix::new(adjacency, SimilarityKind::Given, None)?;
    Ok((dataset, truth))
}

/// How base-predictor outputs are produced for exact GCRF sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictorProcess {
    /// The same `K x N` predictions in every snapshot.
    Fixed(DMatrix<f64>),
    /// Fresh i.i.d. normal predictions per snapshot.
    Gaussian { k: usize, mean: f64, std: f64 },
}

/// Snapshots whose targets are exact draws from the GCRF defined by
/// `alpha` (`K x N`), `beta` and `similarities`.
pub fn generate_gcrf_exact(
    alpha: &DMatrix<f64>,
    beta: &[f64],
    similarities: &[SimilarityMatrix],
    process: &PredictorProcess,
    n_snapshots: usize,
    seed: u64,
) -> Result<Vec<GcrfSnapshot>> {
    if alpha.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::InvalidInput("alpha must be positive".into()));
    }
    if beta.iter().any(|b| !(*b >= 0.0)) {
        return Err(Error::InvalidInput("beta must be nonnegative".into()));
    }
    let (k, n) = alpha.shape();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let draw_predictions = |rng: &mut ChaCha20Rng| -> Result<DMatrix<f64>> {
        match process {
            PredictorProcess::Fixed(r) => {
                if r.shape() != (k, n) {
                    return Err(Error::DimensionMismatch {
                        expected: k * n,
                        got: r.len(),
                    });
                }
                Ok(r.clone())
            }
            PredictorProcess::Gaussian { k: pk, mean, std } => {
                if *pk != k {
                    return Err(Error::DimensionMismatch { expected: k, got: *pk });
                }
                Ok(DMatrix::from_fn(k, n, |_, _| mean + std * gauss(rng)))
            }
        }
    };
    let mut out = Vec::with_capacity(n_snapshots);
    for _ in 0..n_snapshots {
        let snap = GcrfSnapshot::new(draw_predictions(&mut rng)?, similarities.to_vec())?;
        let q = assemble_precision(alpha, beta, &snap)?.to_dense();
        let b = assemble_b(alpha, &snap)?;
        let chol = q
            .cholesky()
            .ok_or(Error::Factorization { min_pivot: f64::NAN })?;
        let mu = chol.solve(&b);
        let z = DVector::from_fn(n, |_, _| gauss(&mut rng));
        // Q = L L^T, so L^-T z has covariance Q^-1.
        let noise = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or(Error::Factorization { min_pivot: 0.0 })?;
        out.push(snap.with_target(mu + noise)?);
    }
    Ok(out)
}
