//! Accuracy and uncertainty metrics and monthly report assembly.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::predictors::{floor_variance, VARIANCE_FLOOR};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: b, got: a });
    }
    if a == 0 {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    Ok(())
}

pub fn rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), truths.len())?;
    let sse: f64 = predictions.iter().zip(truths).map(|(p, y)| (p - y).powi(2)).sum();
    Ok((sse / truths.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NlpdForm {
    /// `1/2 [r^2 / s2 + ln s2]`, minimized at `s2 = r^2`.
    #[default]
    Standard,
    /// `1/2 [r^2 / (2 s2) + ln s2]`, minimized at `s2 = r^2 / 2`.
    Displayed,
}

/// Per-point negative log predictive density without the `ln 2pi` term.
pub fn point_nlpd(residual: f64, variance: f64, form: NlpdForm) -> f64 {
    let r2 = residual * residual;
    match form {
        NlpdForm::Standard => 0.5 * (r2 / variance + variance.ln()),
        NlpdForm::Displayed => 0.5 * (r2 / (2.0 * variance) + variance.ln()),
    }
}

fn check_variances(variances: &[f64]) -> Result<()> {
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(format!("variance {v} is not positive")));
    }
    Ok(())
}

pub fn nlpd(predictions: &[f64], variances: &[f64], truths: &[f64]) -> Result<f64> {
    nlpd_with(predictions, variances, truths, NlpdForm::Standard)
}

pub fn nlpd_with(predictions: &[f64], variances: &[f64], truths: &[f64], form: NlpdForm) -> Result<f64> {
    check_lengths(predictions.len(), truths.len())?;
    check_lengths(variances.len(), truths.len())?;
    check_variances(variances)?;
    let total: f64 = predictions
        .iter()
        .zip(variances)
        .zip(truths)
        .map(|((p, v), y)| point_nlpd(y - p, *v, form))
        .sum();
    Ok(total / truths.len() as f64)
}

/// NLPD with every variance set to its pointwise optimum `max(r^2, floor)`.
pub fn min_nlpd(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), truths.len())?;
    let total: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, y)| {
            let r = y - p;
            point_nlpd(r, (r * r).max(VARIANCE_FLOOR), NlpdForm::Standard)
        })
        .sum();
    Ok(total / truths.len() as f64)
}

/// Fraction of truths within `1.96` predictive standard deviations.
pub fn coverage95(predictions: &[f64], variances: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), truths.len())?;
    check_lengths(variances.len(), truths.len())?;
    check_variances(variances)?;
    let inside = predictions
        .iter()
        .zip(variances)
        .zip(truths)
        .filter(|((p, v), y)| (*y - *p).abs() <= 1.96 * v.sqrt())
        .count();
    Ok(inside as f64 / truths.len() as f64)
}

/// One model's predictions for one month, node-aligned with the truths.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthOutput {
    pub means: Vec<f64>,
    /// Absent for point forecasters; uncertainty metrics are then skipped.
    pub variances: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRun {
    pub name: String,
    /// Same order as the report's months.
    pub months: Vec<MonthOutput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonthMetrics {
    pub rmse: f64,
    pub nlpd: Option<f64>,
    pub min_nlpd: Option<f64>,
    pub coverage95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeNlpd {
    pub node: String,
    pub min_nlpd: f64,
    pub nlpd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelReport {
    pub name: String,
    pub per_month: Vec<MonthMetrics>,
    /// Mean of the per-month entries.
    pub average: MonthMetrics,
    /// Per-node NLPD averaged over months; empty without variances.
    pub per_node: Vec<NodeNlpd>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    Nlpd,
    Coverage95,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::Rmse => "RMSE",
            Metric::Nlpd => "NLPD",
            Metric::Coverage95 => "COV95",
        }
    }

    fn of(self, m: &MonthMetrics) -> Option<f64> {
        match self {
            Metric::Rmse => Some(m.rmse),
            Metric::Nlpd => m.nlpd,
            Metric::Coverage95 => m.coverage95,
        }
    }

    /// Smaller is better; coverage is scored by distance from 0.95.
    fn loss(self, v: f64) -> f64 {
        match self {
            Metric::Coverage95 => (v - 0.95).abs(),
            _ => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranking {
    pub metric: Metric,
    /// Model names, best first, ordered on the averaged metric.
    pub order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub format: String,
    pub months: Vec<String>,
    pub nodes: Vec<String>,
    pub models: Vec<ModelReport>,
    pub rankings: Vec<Ranking>,
}

pub const REPORT_FORMAT: &str = "tgcrf-report 1";

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut total = 0.0;
    for v in values {
        total += v;
        n += 1;
    }
    total / n as f64
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let collected: Option<Vec<f64>> = values.collect();
    collected.map(|v| mean(v.into_iter()))
}

/// Score every model on every month. `truths[m]` holds month `m`'s targets
/// in node order.
pub fn build_report(
    months: &[String],
    nodes: &[String],
    truths: &[Vec<f64>],
    runs: &[ModelRun],
) -> Result<EvaluationReport> {
    if truths.len() != months.len() {
        return Err(Error::InvalidInput(format!(
            "{} months but {} truth vectors",
            months.len(),
            truths.len()
        )));
    }
    let mut models = Vec::with_capacity(runs.len());
    for run in runs {
        if run.months.len() != months.len() {
            return Err(Error::InvalidInput(format!(
                "model {} has {} months, expected {}",
                run.name,
                run.months.len(),
                months.len()
            )));
        }
        let mut per_month = Vec::with_capacity(months.len());
        let mut node_sums = vec![(0.0, 0.0); nodes.len()];
        let with_var = run.months.iter().all(|m| m.variances.is_some());
        for (out, y) in run.months.iter().zip(truths) {
            if y.len() != nodes.len() {
                return Err(Error::DimensionMismatch {
                    expected: nodes.len(),
                    got: y.len(),
                });
            }
            let rmse = rmse(&out.means, y)?;
            let (nlpd_v, min_v, cov) = match &out.variances {
                Some(v) => {
                    let floored: Vec<f64> = v.iter().map(|x| floor_variance(*x)).collect();
                    for (i, s) in node_sums.iter_mut().enumerate() {
                        let r = y[i] - out.means[i];
                        s.0 += point_nlpd(r, (r * r).max(VARIANCE_FLOOR), NlpdForm::Standard);
                        s.1 += point_nlpd(r, floored[i], NlpdForm::Standard);
                    }
                    (
                        Some(nlpd(&out.means, &floored, y)?),
                        Some(min_nlpd(&out.means, y)?),
                        Some(coverage95(&out.means, &floored, y)?),
                    )
                }
                None => (None, None, None),
            };
            per_month.push(MonthMetrics {
                rmse,
                nlpd: nlpd_v,
                min_nlpd: min_v,
                coverage95: cov,
            });
        }
        let average = MonthMetrics {
            rmse: mean(per_month.iter().map(|m| m.rmse)),
            nlpd: mean_opt(per_month.iter().map(|m| m.nlpd)),
            min_nlpd: mean_opt(per_month.iter().map(|m| m.min_nlpd)),
            coverage95: mean_opt(per_month.iter().map(|m| m.coverage95)),
        };
        let per_node = if with_var && !months.is_empty() {
            let m = months.len() as f64;
            nodes
                .iter()
                .zip(&node_sums)
                .map(|(node, (lo, got))| NodeNlpd {
                    node: node.clone(),
                    min_nlpd: lo / m,
                    nlpd: got / m,
                })
                .collect()
        } else {
            Vec::new()
        };
        models.push(ModelReport {
            name: run.name.clone(),
            per_month,
            average,
            per_node,
        });
    }
    let rankings = [Metric::Rmse, Metric::Nlpd, Metric::Coverage95]
        .into_iter()
        .map(|metric| {
            let mut scored: Vec<(&str, f64)> = models
                .iter()
                .filter_map(|m| metric.of(&m.average).map(|v| (m.name.as_str(), metric.loss(v))))
                .collect();
            scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
            Ranking {
                metric,
                order: scored.into_iter().map(|(n, _)| n.to_string()).collect(),
            }
        })
        .collect();
    Ok(EvaluationReport {
        format: REPORT_FORMAT.to_string(),
        months: months.to_vec(),
        nodes: nodes.to_vec(),
        models,
        rankings,
    })
}

fn fmt_value(v: f64) -> String {
    format!("{v:.10e}")
}

impl EvaluationReport {
    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.name == name)
    }

    /// 1-based rank of `model` on `metric`, if it was ranked.
    pub fn rank(&self, metric: Metric, model: &str) -> Option<usize> {
        self.rankings
            .iter()
            .find(|r| r.metric == metric)
            .and_then(|r| r.order.iter().position(|m| m == model))
            .map(|p| p + 1)
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)
            .map_err(|e| Error::io("report sink", std::io::Error::other(e)))
    }

    /// Delimited table: one row per model with the average, the months and
    /// the model's rank on this metric (1 best).
    pub fn write_table<W: Write>(&self, metric: Metric, mut w: W) -> Result<()> {
        let io = |e| Error::io("table sink", e);
        writeln!(w, "{REPORT_FORMAT}").map_err(io)?;
        let mut header = vec![metric.label().to_string(), "average".to_string()];
        header.extend(self.months.iter().cloned());
        header.push("rank".to_string());
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for m in &self.models {
            let Some(avg) = metric.of(&m.average) else { continue };
            let mut row = vec![m.name.clone(), fmt_value(avg)];
            for pm in &m.per_month {
                row.push(metric.of(pm).map(fmt_value).unwrap_or_default());
            }
            row.push(self.rank(metric, &m.name).map(|r| r.to_string()).unwrap_or_default());
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        Ok(())
    }

    /// `node,min_nlpd,nlpd` for one model, sorted by obtained NLPD descending.
    pub fn write_node_nlpd<W: Write>(&self, model: &str, mut w: W) -> Result<()> {
        let io = |e| Error::io("table sink", e);
        let m = self
            .model(model)
            .ok_or_else(|| Error::InvalidInput(format!("no model {model} in report")))?;
        let mut rows = m.per_node.clone();
        rows.sort_by(|a, b| b.nlpd.total_cmp(&a.nlpd).then_with(|| a.node.cmp(&b.node)));
        writeln!(w, "{REPORT_FORMAT}").map_err(io)?;
        writeln!(w, "node,min_nlpd,nlpd").map_err(io)?;
        for r in rows {
            writeln!(w, "{},{},{}", r.node, fmt_value(r.min_nlpd), fmt_value(r.nlpd)).map_err(io)?;
        }
        Ok(())
    }
}
