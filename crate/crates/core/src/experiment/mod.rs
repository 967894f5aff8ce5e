//! Rolling one-step-ahead experiment pipeline.
//!
//! For every test timestep `t` the base predictors are fitted on the `window`
//! timesteps before `t` (targets rescaled with a scaler fitted on that same
//! window) and forecast `t`. Structured models are trained on the
//! `train_snapshots` timesteps before `t`, each of which carries the
//! out-of-sample forecasts made for it in the same rolling fashion, so
//! nothing computed for month `t` looks at data from `t` onwards.

mod config;
mod output;

pub use config::{
    DataSource, ExperimentConfig, GraphSpec, RefitPolicy, UfFeatures, UfSettings, EXPERIMENT_FORMAT,
};
pub use output::{
    evaluate_prediction_dir, read_predictions, run_experiment_to_dir, slug, write_outputs,
    write_predictions, MANIFEST_FORMAT, PREDICTIONS_FORMAT,
};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{lag_vector, LagFeatureMatrix, TargetScaler, TemporalGraphDataset};
use crate::error::{Error, Result, StageExt};
use crate::ext::{
    coverage_index, train_ufgcrf, train_ugcrf, StructuredKind, StructuredModel, UfgcrfParams, UgcrfParams,
};
use crate::gcrf::{train_gcrf, GcrfParams, GcrfSnapshot, TrainConfig, TrainReport};
use crate::metrics::{build_report, EvaluationReport, ModelRun, MonthOutput};
use crate::predictors::{
    fit_gp, fit_linear_ar, floor_variance, Family, GpModel, GpSearch, LinearArModel, PredictiveDistribution,
};
use crate::similarity::{
    common_history_similarity, histograms_from_attribute, js_divergence_similarity, sparsify, SimilarityMatrix,
};
use crate::synth::generate_ar_graph;

/// Load the configured dataset and, for synthetic sources, the true graph.
pub fn load_source(cfg: &ExperimentConfig) -> Result<(TemporalGraphDataset, Option<SimilarityMatrix>)> {
    match &cfg.source {
        DataSource::Csv(path) => Ok((TemporalGraphDataset::ingest_path(path, &Default::default())?, None)),
        DataSource::Synth(s) => generate_ar_graph(s).map(|(d, g)| (d, Some(g))),
    }
}

#[derive(Debug, Clone)]
enum BaseModel {
    Linear(LinearArModel),
    Gp(GpModel),
}

impl BaseModel {
    fn predict(&self, x: &[f64]) -> Result<PredictiveDistribution> {
        match self {
            BaseModel::Linear(m) => m.predict(x),
            BaseModel::Gp(m) => m.predict(x),
        }
    }
}

/// Base predictors fitted on the window ending at one row.
struct FitSet {
    scaled: TemporalGraphDataset,
    /// `[family][lag][node]`
    models: Vec<Vec<Vec<BaseModel>>>,
}

/// Everything known about row `s` from the window ending at `fit_end`.
#[derive(Debug, Clone)]
struct RowForecast {
    truth: Option<DVector<f64>>,
    /// Per family: `K x N` means and variances, one row per lag.
    base: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    similarity: SimilarityMatrix,
    /// Recent targets and previous-step attributes, `N x (lags + attrs)`.
    context: DMatrix<f64>,
}

/// Column standardization fitted on training features.
#[derive(Debug, Clone)]
struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[DMatrix<f64>]) -> Self {
        let d = rows.first().map_or(0, |m| m.ncols());
        let count: usize = rows.iter().map(|m| m.nrows()).sum();
        let mut mean = vec![0.0; d];
        for m in rows {
            for c in 0..d {
                mean[c] += m.column(c).sum();
            }
        }
        mean.iter_mut().for_each(|v| *v /= count as f64);
        let mut std = vec![0.0; d];
        for m in rows {
            for c in 0..d {
                std[c] += m.column(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        for s in &mut std {
            *s = (*s / count as f64).sqrt();
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        Self { mean, std }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, c| (x[(i, c)] - self.mean[c]) / self.std[c])
    }
}

/// Structured models of one base family, fitted on one set of snapshots.
#[derive(Debug, Clone)]
struct FittedFamily {
    standardizer: Standardizer,
    models: Vec<StructuredModel>,
    reports: Vec<(StructuredKind, TrainReport)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingNote {
    pub model: String,
    pub month: String,
    pub converged: bool,
    pub iterations: usize,
    pub mean_log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config_hash: String,
    pub months: Vec<String>,
    pub nodes: Vec<String>,
    /// Scaled truths per month.
    pub truths: Vec<Vec<f64>>,
    /// Unstructured models first, then structured ones.
    pub runs: Vec<ModelRun>,
    pub report: EvaluationReport,
    /// `(model name, month, fitted model)`
    pub models: Vec<(String, String, StructuredModel)>,
    pub training: Vec<TrainingNote>,
}

pub fn base_model_name(family: Family, lag: usize) -> String {
    format!("{} lag{lag}", family.label())
}

pub fn structured_model_name(kind: StructuredKind, family: Family) -> String {
    format!("{} + {}", kind.label(), family.label())
}

/// Sort key giving reports a fixed model order: base models by family then
/// lag, then structured models by family then kind, then anything else by
/// name.
pub fn model_order_key(name: &str) -> (u8, u8, usize, String) {
    let family = |s: &str| match s {
        "LR" => Some(0),
        "GP" => Some(1),
        _ => None,
    };
    if let Some((kind, fam)) = name.split_once(" + ") {
        let k = [StructuredKind::Gcrf, StructuredKind::Ugcrf, StructuredKind::Ufgcrf]
            .iter()
            .position(|k| k.label() == kind);
        if let (Some(k), Some(f)) = (k, family(fam)) {
            return (1, f, k, String::new());
        }
    } else if let Some((fam, lag)) = name.split_once(" lag") {
        if let (Some(f), Ok(l)) = (family(fam), lag.parse()) {
            return (0, f, l, String::new());
        }
    }
    (2, 0, 0, name.to_string())
}

/// Round to the 10 significant digits used in prediction files.
pub(crate) fn round10(v: f64) -> f64 {
    format!("{v:.9e}").parse().unwrap_or(v)
}

struct Engine<'a> {
    cfg: &'a ExperimentConfig,
    ds: &'a TemporalGraphDataset,
    static_graph: Option<SimilarityMatrix>,
    search: GpSearch,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ExperimentConfig, ds: &'a TemporalGraphDataset, truth: Option<SimilarityMatrix>) -> Result<Self> {
        let static_graph = match &cfg.graph {
            GraphSpec::Truth => Some(truth.ok_or_else(|| Error::InvalidInput("no true graph available".into()))?),
            GraphSpec::File(path) => {
                let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
                Some(SimilarityMatrix::read_triplets(std::io::BufReader::new(f))?)
            }
            _ => None,
        };
        if let Some(g) = &static_graph {
            if g.n() != ds.n_nodes() {
                return Err(Error::DimensionMismatch {
                    expected: ds.n_nodes(),
                    got: g.n(),
                });
            }
        }
        for a in &cfg.uf.features.attributes {
            ds.attribute(a)?;
        }
        let g = cfg.gp_grid;
        let search = GpSearch {
            noise_points: g,
            amplitude_points: g,
            length_points: g,
            ..GpSearch::default()
        };
        Ok(Self {
            cfg,
            ds,
            static_graph,
            search,
        })
    }

    fn k(&self) -> usize {
        self.cfg.lags.len()
    }

    /// Fit base predictors on rows `fit_end + 1 - window ..= fit_end`.
    fn fit_window(&self, fit_end: usize) -> Result<FitSet> {
        let w = self.cfg.window;
        let rows = fit_end + 1 - w..fit_end + 1;
        let scaled = match self.cfg.scale {
            Some(mode) => TargetScaler::fit(self.ds, mode, rows.clone())?.transform(self.ds),
            None => self.ds.clone(),
        };
        let n = self.ds.n_nodes();
        let windows: Vec<Vec<f64>> = (0..n).map(|i| scaled.series(i)[rows.clone()].to_vec()).collect();
        let mut models = Vec::with_capacity(self.cfg.families.len());
        for &family in &self.cfg.families {
            let mut per_lag = Vec::with_capacity(self.k());
            for &lag in &self.cfg.lags {
                let fitted: Vec<BaseModel> = windows
                    .par_iter()
                    .map(|series| {
                        let design = LagFeatureMatrix::from_series(series, lag, 0..w)?;
                        Ok(match family {
                            Family::Linear => BaseModel::Linear(fit_linear_ar(&design)?),
                            Family::Gp => BaseModel::Gp(fit_gp(&design, &self.search)?),
                        })
                    })
                    .collect::<Result<_>>()?;
                per_lag.push(fitted);
            }
            models.push(per_lag);
        }
        Ok(FitSet { scaled, models })
    }

    fn forecast(&self, fit: &FitSet, s: usize) -> Result<RowForecast> {
        let n = self.ds.n_nodes();
        let series: Vec<Vec<f64>> = (0..n).map(|i| fit.scaled.series(i)).collect();
        let mut base = Vec::with_capacity(self.cfg.families.len());
        for per_lag in &fit.models {
            let mut means = DMatrix::zeros(self.k(), n);
            let mut vars = DMatrix::zeros(self.k(), n);
            for (k, (models, &lag)) in per_lag.iter().zip(&self.cfg.lags).enumerate() {
                for i in 0..n {
                    let p = models[i].predict(&lag_vector(&series[i], s, lag))?;
                    means[(k, i)] = p.mean;
                    vars[(k, i)] = p.variance;
                }
            }
            base.push((means, vars));
        }
        let truth = (s < self.ds.n_timesteps()).then(|| DVector::from_fn(n, |i, _| series[i][s]));
        let similarity = match (&self.cfg.graph, &self.static_graph) {
            (_, Some(g)) => g.clone(),
            (GraphSpec::CommonHistory { attribute, h, variant }, None) => {
                common_history_similarity(&fit.scaled, attribute, *h, s, *variant)?
            }
            (GraphSpec::JsDivergence { attribute, bins }, None) => {
                let end = s.min(self.ds.n_timesteps());
                let start = end.saturating_sub(self.cfg.window);
                js_divergence_similarity(&histograms_from_attribute(&fit.scaled, attribute, start..end, *bins)?)?
            }
            _ => unreachable!("static graphs are loaded up front"),
        };
        let similarity = match self.cfg.sparsify {
            Some(rule) => sparsify(&similarity, rule)?,
            None => similarity,
        };
        let f = &self.cfg.uf.features;
        let attrs: Vec<&DMatrix<f64>> = f
            .attributes
            .iter()
            .map(|a| fit.scaled.attribute(a))
            .collect::<Result<_>>()?;
        let context = DMatrix::from_fn(n, f.target_lags + attrs.len(), |i, c| {
            if c < f.target_lags {
                series[i][s - 1 - c]
            } else {
                attrs[c - f.target_lags][(s - 1, i)]
            }
        });
        Ok(RowForecast {
            truth,
            base,
            similarity,
            context,
        })
    }

    /// Forecasts for `(fit_end, row)` pairs, one fit per distinct end.
    fn forecasts(&self, pairs: &[(usize, usize)]) -> Result<BTreeMap<(usize, usize), RowForecast>> {
        let mut by_end: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(e, s) in pairs {
            by_end.entry(e).or_default().push(s);
        }
        let groups: Vec<(usize, Vec<usize>)> = by_end.into_iter().collect();
        let done: Vec<Vec<((usize, usize), RowForecast)>> = groups
            .par_iter()
            .map(|(e, rows)| {
                let fit = self.fit_window(*e)?;
                rows.iter()
                    .map(|&s| Ok(((*e, s), self.forecast(&fit, s)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(done.into_iter().flatten().collect())
    }

    /// Raw ufGCRF features for one family: target lags, log variances,
    /// attributes.
    fn raw_features(&self, row: &RowForecast, family: usize) -> DMatrix<f64> {
        let f = &self.cfg.uf.features;
        let vars = &row.base[family].1;
        let kv = if f.log_variance { self.k() } else { 0 };
        let n = row.context.nrows();
        DMatrix::from_fn(n, row.context.ncols() + kv, |i, c| {
            if c < f.target_lags {
                row.context[(i, c)]
            } else if c < f.target_lags + kv {
                floor_variance(vars[(c - f.target_lags, i)]).ln()
            } else {
                row.context[(i, c - kv)]
            }
        })
    }

    fn snapshot(&self, row: &RowForecast, family: usize, std: &Standardizer) -> Result<GcrfSnapshot> {
        let (means, vars) = &row.base[family];
        let mut snap = GcrfSnapshot::new(means.clone(), vec![row.similarity.clone()])?
            .with_variances(vars.clone())?
            .with_features(std.apply(&self.raw_features(row, family)))?
            .with_horizon(1);
        if let Some(y) = &row.truth {
            snap = snap.with_target(y.clone())?;
        }
        Ok(snap)
    }

    fn fit_family(&self, family: usize, train: &[&RowForecast], seed: u64) -> Result<FittedFamily> {
        let raw: Vec<DMatrix<f64>> = train.iter().map(|r| self.raw_features(r, family)).collect();
        let standardizer = Standardizer::fit(&raw);
        let snaps: Vec<GcrfSnapshot> = train
            .iter()
            .map(|r| self.snapshot(r, family, &standardizer))
            .collect::<Result<_>>()?;
        let k = self.k();
        let n = self.ds.n_nodes();
        let want = |kind| self.cfg.models.contains(&kind);
        let mut models = Vec::new();
        let mut reports = Vec::new();
        if want(StructuredKind::Gcrf) {
            let init = GcrfParams::init(self.cfg.alpha_mode, k, n, 1);
            let (p, rep) = train_gcrf(&snaps, &init, &TrainConfig::default())?;
            models.push(StructuredModel::Gcrf(p));
            reports.push((StructuredKind::Gcrf, rep));
        }
        if want(StructuredKind::Ugcrf) || want(StructuredKind::Ufgcrf) {
            let mut ci = Vec::with_capacity(k);
            for kk in 0..k {
                let (mut m, mut v, mut y) = (Vec::new(), Vec::new(), Vec::new());
                for s in &snaps {
                    m.extend(s.predictions.row(kk).iter());
                    v.extend(s.variances.as_ref().expect("set above").row(kk).iter());
                    y.extend(s.target()?.iter());
                }
                ci.push(coverage_index(&m, &v, &y)?);
            }
            let init = UgcrfParams::init(k, 1, 1, ci, false)?;
            let (u, rep) = train_ugcrf(&snaps, &init, &TrainConfig::default())?;
            if want(StructuredKind::Ugcrf) {
                reports.push((StructuredKind::Ugcrf, rep));
            }
            if want(StructuredKind::Ufgcrf) {
                let init = self.ufgcrf_init(&u, &standardizer, seed);
                let mut tc = self.cfg.uf.train;
                tc.seed = seed;
                let (f, rep) = train_ufgcrf(&snaps, &init, &tc)?;
                if want(StructuredKind::Ugcrf) {
                    models.push(StructuredModel::Ugcrf(u));
                }
                models.push(StructuredModel::Ufgcrf(f));
                reports.push((StructuredKind::Ufgcrf, rep));
            } else {
                models.push(StructuredModel::Ugcrf(u));
            }
        }
        Ok(FittedFamily {
            standardizer,
            models,
            reports,
        })
    }

    /// Random networks, warm-started to reproduce the uGCRF weights when the
    /// log-variance features and a direct path are available.
    fn ufgcrf_init(&self, u: &UgcrfParams, std: &Standardizer, seed: u64) -> UfgcrfParams {
        let uf = &self.cfg.uf;
        let d = std.mean.len();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut p = UfgcrfParams::init(self.k(), d, uf.hidden, uf.skip, 1, &mut rng);
        p.v = u.v.clone();
        if !uf.warm_start {
            return p;
        }
        let tl = uf.features.target_lags;
        for (k, net) in p.nets.iter_mut().enumerate() {
            let shift = u.u[k] + u.ci[k].ln();
            if !uf.features.log_variance || net.direct_weights_mut().is_none() {
                *net.output_bias_mut() = shift;
                continue;
            }
            let col = tl + k;
            // alpha = exp(shift - ln s2), ln s2 = mean + std * z
            *net.output_bias_mut() = shift - std.mean[col];
            if net.hidden() > 0 {
                let h = net.hidden();
                let w2 = h * d + h;
                net.params[w2..w2 + h].iter_mut().for_each(|w| *w = 0.0);
            }
            let direct = net.direct_weights_mut().expect("checked above");
            direct.iter_mut().for_each(|w| *w = 0.0);
            direct[col] = -std.std[col];
        }
        p
    }
}

/// Row indices of the test months and the fit end used for each.
struct Plan {
    test_rows: Vec<usize>,
    fit_ends: Vec<usize>,
    /// Structured training rows per test month.
    train_rows: Vec<Vec<usize>>,
}

fn row_of(ds: &TemporalGraphDataset, timestep: i64, what: &str) -> Result<usize> {
    ds.timesteps()
        .iter()
        .position(|t| *t == timestep)
        .ok_or_else(|| Error::InvalidInput(format!("{what} timestep {timestep} not in dataset")))
}

/// Validate the config and its rolling plan against the data without
/// fitting anything.
pub fn check_experiment(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate().stage("config")?;
    let (ds, _) = load_source(cfg).stage("ingest")?;
    plan(cfg, &ds).stage("config").map(|_| ())
}

fn plan(cfg: &ExperimentConfig, ds: &TemporalGraphDataset) -> Result<Plan> {
    let t_len = ds.n_timesteps();
    let start = match cfg.test_start {
        Some(ts) => row_of(ds, ts, "test_start")?,
        None => t_len
            .checked_sub(cfg.test_months)
            .ok_or(Error::InsufficientSamples {
                needed: cfg.test_months,
                available: t_len,
            })?,
    };
    if start + cfg.test_months > t_len {
        return Err(Error::InvalidInput(format!(
            "{} test months from row {start} run past the {t_len} timesteps",
            cfg.test_months
        )));
    }
    let train_end = match cfg.train_end {
        Some(ts) => row_of(ds, ts, "train_end")?,
        None => start
            .checked_sub(1)
            .ok_or_else(|| Error::InvalidInput("no timesteps before the test window".into()))?,
    };
    if train_end >= start {
        return Err(Error::InvalidInput(format!(
            "test window starting at {} overlaps training window ending at {}",
            ds.timesteps()[start],
            ds.timesteps()[train_end]
        )));
    }
    let s = cfg.train_snapshots;
    let test_rows: Vec<usize> = (start..start + cfg.test_months).collect();
    let (fit_ends, train_rows): (Vec<usize>, Vec<Vec<usize>>) = test_rows
        .iter()
        .map(|&t| match cfg.refit {
            RefitPolicy::Monthly => (t - 1, (t.saturating_sub(s)..t).collect()),
            RefitPolicy::Once => (train_end, (train_end + 1 - s.min(train_end + 1)..train_end + 1).collect()),
        })
        .unzip();
    let earliest = train_rows.iter().flatten().chain(&test_rows).copied().min().unwrap_or(0);
    let mut needed = cfg.window;
    if let GraphSpec::CommonHistory { h, .. } = cfg.graph {
        needed = needed.max(h);
    }
    needed = needed.max(cfg.uf.features.target_lags).max(1);
    for rows in &train_rows {
        if rows.len() < s || rows.first().copied().unwrap_or(0) < needed {
            return Err(Error::InsufficientSamples {
                needed: needed + s + cfg.test_months,
                available: t_len,
            });
        }
    }
    // Every row that feeds a window must be observed.
    let first = earliest + 1 - needed.min(earliest + 1);
    for t in first..start + cfg.test_months {
        for i in 0..ds.n_nodes() {
            if !ds.is_observed(t, i) {
                return Err(Error::InvalidInput(format!(
                    "target missing for node {} at timestep {}",
                    ds.node_ids()[i],
                    ds.timesteps()[t]
                )));
            }
        }
    }
    Ok(Plan {
        test_rows,
        fit_ends,
        train_rows,
    })
}

/// Run the rolling protocol in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate().stage("config")?;
    let (ds, truth) = load_source(cfg).stage("ingest")?;
    run_on_dataset(cfg, &ds, truth)
}

pub fn run_on_dataset(
    cfg: &ExperimentConfig,
    ds: &TemporalGraphDataset,
    truth: Option<SimilarityMatrix>,
) -> Result<ExperimentResult> {
    cfg.validate().stage("config")?;
    let plan = plan(cfg, ds).stage("config")?;
    let engine = Engine::new(cfg, ds, truth).stage("graph")?;
    let mut pairs: Vec<(usize, usize)> = plan.test_rows.iter().copied().zip(&plan.fit_ends).map(|(t, e)| (*e, t)).collect();
    for rows in &plan.train_rows {
        pairs.extend(rows.iter().map(|&s| (s - 1, s)));
    }
    pairs.sort_unstable();
    pairs.dedup();
    log::info!("forecasting {} rows", pairs.len());
    let cache = engine.forecasts(&pairs).stage("base-predictors")?;

    let families = &cfg.families;
    let month_seed = |m: usize, f: usize| cfg.seed.wrapping_mul(1_000_003).wrapping_add((m * families.len() + f) as u64);
    let fit_for = |m: usize, f: usize| -> Result<FittedFamily> {
        let train: Vec<&RowForecast> = plan.train_rows[m].iter().map(|&s| &cache[&(s - 1, s)]).collect();
        engine.fit_family(f, &train, month_seed(m, f))
    };
    let once: Option<Vec<FittedFamily>> = match cfg.refit {
        RefitPolicy::Once if !cfg.models.is_empty() => Some(
            (0..families.len())
                .into_par_iter()
                .map(|f| fit_for(0, f))
                .collect::<Result<_>>()
                .stage("structured-training")?,
        ),
        _ => None,
    };

    let months: Vec<String> = plan.test_rows.iter().map(|&t| ds.timesteps()[t].to_string()).collect();
    type MonthResult = (Vec<MonthOutput>, Vec<(String, StructuredModel)>, Vec<TrainingNote>);
    let per_month: Vec<MonthResult> = (0..plan.test_rows.len())
        .into_par_iter()
        .map(|m| -> Result<MonthResult> {
            let t = plan.test_rows[m];
            let row = &cache[&(plan.fit_ends[m], t)];
            let mut outputs = Vec::new();
            for (means, vars) in &row.base {
                for k in 0..cfg.lags.len() {
                    outputs.push(MonthOutput {
                        means: means.row(k).iter().copied().collect(),
                        variances: Some(vars.row(k).iter().copied().collect()),
                    });
                }
            }
            let mut fitted_models = Vec::new();
            let mut notes = Vec::new();
            if !cfg.models.is_empty() {
                for (f, &family) in families.iter().enumerate() {
                    let fitted = match &once {
                        Some(all) => all[f].clone(),
                        None => fit_for(m, f).stage("structured-training")?,
                    };
                    let snap = engine.snapshot(row, f, &fitted.standardizer).stage("predict")?;
                    for model in &fitted.models {
                        let post = model.posterior(&snap).stage("predict")?;
                        outputs.push(MonthOutput {
                            means: post.mu.iter().copied().collect(),
                            variances: Some(post.var_diag.iter().map(|v| floor_variance(*v)).collect()),
                        });
                        fitted_models.push((structured_model_name(model.kind(), family), model.clone()));
                    }
                    for (kind, rep) in &fitted.reports {
                        notes.push(TrainingNote {
                            model: structured_model_name(*kind, family),
                            month: months[m].clone(),
                            converged: rep.converged(),
                            iterations: rep.iterations,
                            mean_log_likelihood: rep.mean_log_likelihood,
                        });
                    }
                }
            }
            Ok((outputs, fitted_models, notes))
        })
        .collect::<Result<_>>()?;

    let mut names: Vec<String> = Vec::new();
    for &f in families {
        for &lag in &cfg.lags {
            names.push(base_model_name(f, lag));
        }
    }
    for &f in families {
        for kind in [StructuredKind::Gcrf, StructuredKind::Ugcrf, StructuredKind::Ufgcrf] {
            if cfg.models.contains(&kind) {
                names.push(structured_model_name(kind, f));
            }
        }
    }
    let mut runs: Vec<ModelRun> = names
        .iter()
        .map(|n| ModelRun {
            name: n.clone(),
            months: Vec::with_capacity(months.len()),
        })
        .collect();
    runs.sort_by_key(|r| model_order_key(&r.name));
    let mut models = Vec::new();
    let mut training = Vec::new();
    for (m, (outputs, fitted, notes)) in per_month.into_iter().enumerate() {
        // base outputs in family/lag order, then structured per family in
        // the order fit_family emits them
        let mut by_name: BTreeMap<String, MonthOutput> = BTreeMap::new();
        let n_base = families.len() * cfg.lags.len();
        for (name, out) in names[..n_base].iter().zip(outputs.iter()) {
            by_name.insert(name.clone(), out.clone());
        }
        for ((name, model), out) in fitted.into_iter().zip(outputs.into_iter().skip(n_base)) {
            by_name.insert(name.clone(), out);
            models.push((name, months[m].clone(), model));
        }
        for run in &mut runs {
            let out = by_name
                .remove(&run.name)
                .ok_or_else(|| Error::InvalidInput(format!("no output for {}", run.name)))?;
            run.months.push(MonthOutput {
                means: out.means.iter().map(|v| round10(*v)).collect(),
                variances: out.variances.map(|v| v.iter().map(|x| round10(*x)).collect()),
            });
        }
        training.extend(notes);
    }
    let truths: Vec<Vec<f64>> = plan
        .test_rows
        .iter()
        .zip(&plan.fit_ends)
        .map(|(&t, &e)| {
            cache[&(e, t)]
                .truth
                .as_ref()
                .map(|y| y.iter().map(|v| round10(*v)).collect())
                .ok_or_else(|| Error::InvalidInput("test row without target".into()))
        })
        .collect::<Result<_>>()?;
    let report = build_report(&months, ds.node_ids(), &truths, &runs).stage("evaluate")?;
    for note in training.iter().filter(|n| !n.converged) {
        log::warn!("{} for {} stopped before convergence", note.model, note.month);
    }
    Ok(ExperimentResult {
        config_hash: cfg.hash(),
        months,
        nodes: ds.node_ids().to_vec(),
        truths,
        runs,
        report,
        models,
        training,
    })
}

/// Fit structured models for forecasting the timestep after the last one.
pub fn train_latest(cfg: &ExperimentConfig) -> Result<Vec<(String, StructuredModel)>> {
    cfg.validate().stage("config")?;
    let (ds, truth) = load_source(cfg).stage("ingest")?;
    let engine = Engine::new(cfg, &ds, truth).stage("graph")?;
    let t_len = ds.n_timesteps();
    let rows = latest_rows(cfg, t_len)?;
    let pairs: Vec<(usize, usize)> = rows.iter().map(|&s| (s - 1, s)).collect();
    let cache = engine.forecasts(&pairs).stage("base-predictors")?;
    let train: Vec<&RowForecast> = pairs.iter().map(|p| &cache[p]).collect();
    let mut out = Vec::new();
    for (f, &family) in cfg.families.iter().enumerate() {
        let fitted = engine.fit_family(f, &train, cfg.seed).stage("structured-training")?;
        for m in fitted.models {
            out.push((structured_model_name(m.kind(), family), m));
        }
    }
    Ok(out)
}

fn latest_rows(cfg: &ExperimentConfig, t_len: usize) -> Result<Vec<usize>> {
    let s = cfg.train_snapshots;
    if t_len < s + cfg.window {
        return Err(Error::InsufficientSamples {
            needed: s + cfg.window,
            available: t_len,
        })
        .stage("config");
    }
    Ok((t_len - s..t_len).collect())
}

/// Predictive distributions for the timestep after the last one, using
/// models from [`train_latest`]. Models are matched to families by name.
pub fn predict_latest(
    cfg: &ExperimentConfig,
    models: &[(String, StructuredModel)],
) -> Result<Vec<(String, Vec<PredictiveDistribution>)>> {
    cfg.validate().stage("config")?;
    let (ds, truth) = load_source(cfg).stage("ingest")?;
    let engine = Engine::new(cfg, &ds, truth).stage("graph")?;
    let t_len = ds.n_timesteps();
    let rows = latest_rows(cfg, t_len)?;
    let mut pairs: Vec<(usize, usize)> = rows.iter().map(|&s| (s - 1, s)).collect();
    pairs.push((t_len - 1, t_len));
    let cache = engine.forecasts(&pairs).stage("base-predictors")?;
    let target = &cache[&(t_len - 1, t_len)];
    let mut out = Vec::new();
    for (name, model) in models {
        let f = cfg
            .families
            .iter()
            .position(|&fam| structured_model_name(model.kind(), fam) == *name)
            .ok_or_else(|| Error::InvalidInput(format!("model {name} does not match the configured families")))
            .stage("predict")?;
        let raw: Vec<DMatrix<f64>> = rows.iter().map(|&s| engine.raw_features(&cache[&(s - 1, s)], f)).collect();
        let std = Standardizer::fit(&raw);
        let snap = engine.snapshot(target, f, &std).stage("predict")?;
        let post = model.posterior(&snap).stage("predict")?;
        out.push((
            name.clone(),
            post.mu.iter().zip(post.var_diag.iter()).map(|(m, v)| PredictiveDistribution::new(*m, *v)).collect(),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthConfig;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(DataSource::Synth(SynthConfig {
            n_nodes: 6,
            n_timesteps: 40,
            seed: 1,
            ..SynthConfig::default()
        }));
        cfg.lags = vec![1, 2];
        cfg.window = 10;
        cfg.test_months = 3;
        cfg.train_snapshots = 4;
        cfg.gp_grid = 3;
        cfg.uf.train.max_epochs = 20;
        cfg
    }

    #[test]
    fn small_run_produces_every_model() {
        let cfg = small_config();
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.months, vec!["38", "39", "40"]);
        assert_eq!(res.runs.len(), 4 + 6);
        assert_eq!(res.runs[4].name, "GCRF + LR");
        assert_eq!(res.models.len(), 6 * 3);
        for run in &res.runs {
            assert_eq!(run.months.len(), 3);
            for m in &run.months {
                assert!(m.variances.as_ref().unwrap().iter().all(|v| *v > 0.0));
            }
        }
    }

    #[test]
    fn leakage_free_windows() {
        let cfg = small_config();
        let (ds, truth) = load_source(&cfg).unwrap();
        let p = plan(&cfg, &ds).unwrap();
        for (m, &t) in p.test_rows.iter().enumerate() {
            assert!(p.fit_ends[m] < t);
            assert!(p.train_rows[m].iter().all(|&s| s < t));
        }
        // perturbing the future leaves earlier forecasts unchanged
        let engine = Engine::new(&cfg, &ds, truth.clone()).unwrap();
        let before = engine.forecasts(&[(36, 37)]).unwrap();
        let mut y = ds.targets().clone();
        for i in 0..ds.n_nodes() {
            y[(37, i)] += 100.0;
            y[(39, i)] -= 50.0;
        }
        let changed = ds.with_targets(y);
        let engine2 = Engine::new(&cfg, &changed, truth).unwrap();
        let after = engine2.forecasts(&[(36, 37)]).unwrap();
        let (a, b) = (&before[&(36, 37)], &after[&(36, 37)]);
        assert_eq!(a.base[0].0, b.base[0].0);
        assert_eq!(a.base[1].1, b.base[1].1);
        assert_eq!(a.similarity, b.similarity);
        assert_ne!(a.truth, b.truth);
    }

    #[test]
    fn overlapping_or_short_windows_are_rejected() {
        let mut cfg = small_config();
        cfg.test_start = Some(30);
        cfg.train_end = Some(32);
        assert!(run_experiment(&cfg).is_err());
        let mut cfg = small_config();
        cfg.train_snapshots = 30;
        let err = run_experiment(&cfg).unwrap_err().to_string();
        assert!(err.starts_with("config:"), "{err}");
    }

    #[test]
    fn fit_once_shares_models_across_months() {
        let mut cfg = small_config();
        cfg.refit = RefitPolicy::Once;
        cfg.models = vec![StructuredKind::Gcrf];
        cfg.families = vec![Family::Linear];
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.models.len(), 3);
        assert_eq!(res.models[0].2, res.models[2].2);
    }

    #[test]
    fn warm_start_reproduces_ugcrf() {
        let cfg = small_config();
        let (ds, truth) = load_source(&cfg).unwrap();
        let engine = Engine::new(&cfg, &ds, truth).unwrap();
        let pairs: Vec<(usize, usize)> = (30..34).map(|s| (s - 1, s)).collect();
        let cache = engine.forecasts(&pairs).unwrap();
        let train: Vec<&RowForecast> = pairs.iter().map(|p| &cache[p]).collect();
        let raw: Vec<DMatrix<f64>> = train.iter().map(|r| engine.raw_features(r, 0)).collect();
        let std = Standardizer::fit(&raw);
        let snaps: Vec<GcrfSnapshot> = train.iter().map(|r| engine.snapshot(r, 0, &std).unwrap()).collect();
        let mut u = UgcrfParams::init(2, 1, 1, vec![0.9, 0.8], false).unwrap();
        u.u = vec![0.3, -0.2];
        u.v = vec![0.1];
        let f = engine.ufgcrf_init(&u, &std, 5);
        for s in &snaps {
            let a = u.alpha(s).unwrap();
            let b = f.alpha(s).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-10 * x.abs(), "{x} vs {y}");
            }
        }
    }
}
