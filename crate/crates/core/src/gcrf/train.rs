use rayon::prelude::*;
use serde::Serialize;

use super::{GcrfParams, GcrfSnapshot};
use crate::error::{Error, Result};
use crate::optim::{minimize, LbfgsConfig, Termination};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainConfig {
    pub lbfgs: LbfgsConfig,
    /// Keep `v` at its initial value and fit only `u`.
    pub freeze_beta: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub termination: Termination,
    pub iterations: usize,
    /// Mean per-snapshot log-likelihood at the returned parameters.
    pub mean_log_likelihood: f64,
}

impl TrainReport {
    pub fn converged(&self) -> bool {
        self.termination.converged()
    }
}

/// Maximize the mean over snapshots of `per_snapshot(theta, s)`, which
/// returns a log-likelihood and its gradient in `theta`. Snapshots are
/// evaluated in parallel and reduced in order.
pub fn maximize_mean_likelihood<F>(
    snapshots: &[GcrfSnapshot],
    theta0: &[f64],
    lbfgs: &LbfgsConfig,
    per_snapshot: F,
) -> Result<(Vec<f64>, TrainReport)>
where
    F: Fn(&[f64], &GcrfSnapshot) -> Result<(f64, Vec<f64>)> + Sync,
{
    if snapshots.is_empty() {
        return Err(Error::InsufficientSamples {
            needed: 1,
            available: 0,
        });
    }
    for s in snapshots {
        s.target()?;
    }
    let scale = 1.0 / snapshots.len() as f64;
    let objective = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let parts: Vec<(f64, Vec<f64>)> = snapshots
            .par_iter()
            .map(|s| per_snapshot(theta, s))
            .collect::<Result<_>>()?;
        let mut value = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for (v, g) in parts {
            value -= v * scale;
            for (a, b) in grad.iter_mut().zip(g) {
                *a -= b * scale;
            }
        }
        Ok((value, grad))
    };
    let m = minimize(objective, theta0, lbfgs)?;
    if !m.termination.converged() {
        log::warn!(
            "likelihood maximization stopped without converging ({:?} after {} iterations)",
            m.termination,
            m.iterations
        );
    }
    Ok((
        m.x,
        TrainReport {
            termination: m.termination,
            iterations: m.iterations,
            mean_log_likelihood: -m.value,
        },
    ))
}

/// Fit `(u, v)` by maximizing the snapshots' summed log-likelihood, starting
/// from `init`.
pub fn train_gcrf(
    snapshots: &[GcrfSnapshot],
    init: &GcrfParams,
    cfg: &TrainConfig,
) -> Result<(GcrfParams, TrainReport)> {
    let nu = init.u.len();
    let mut theta0 = init.u.clone();
    if !cfg.freeze_beta {
        theta0.extend_from_slice(&init.v);
    }
    let unpack = |theta: &[f64]| {
        let mut p = init.clone();
        p.u.copy_from_slice(&theta[..nu]);
        if !cfg.freeze_beta {
            p.v.copy_from_slice(&theta[nu..]);
        }
        p
    };
    let (theta, report) = maximize_mean_likelihood(snapshots, &theta0, &cfg.lbfgs, |theta, s| {
        let (ll, mut du, dv) = unpack(theta).gradient(s)?;
        if !cfg.freeze_beta {
            du.extend(dv);
        }
        Ok((ll, du))
    })?;
    Ok((unpack(&theta), report))
}
