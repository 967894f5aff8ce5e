use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::nn::Mlp;
use crate::error::{Error, Result};
use crate::gcrf::{
    assemble_b, assemble_precision, likelihood_terms, log_likelihood, maximize_mean_likelihood,
    posterior, GcrfPosterior, GcrfSnapshot, TrainReport,
};
use crate::optim::{LbfgsConfig, Termination};
use crate::textfmt::Record;

/// Association weights `alpha_k(x) = exp(net_k(x))` of node features.
#[derive(Debug, Clone, PartialEq)]
pub struct UfgcrfParams {
    pub nets: Vec<Mlp>,
    pub v: Vec<f64>,
}

impl UfgcrfParams {
    /// Networks initialized uniformly in `[-0.1, 0.1]`, `beta = 1`.
    pub fn init<R: Rng>(k: usize, input_dim: usize, hidden: usize, skip: bool, l: usize, rng: &mut R) -> Self {
        Self {
            nets: (0..k).map(|_| Mlp::random(input_dim, hidden, skip, 0.1, rng)).collect(),
            v: vec![0.0; l],
        }
    }

    pub fn k(&self) -> usize {
        self.nets.len()
    }

    pub fn input_dim(&self) -> usize {
        self.nets.first().map_or(0, Mlp::input_dim)
    }

    pub fn beta(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.exp()).collect()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.nets.iter().flat_map(|n| n.params.iter().copied()).collect()
    }

    pub fn n_theta(&self) -> usize {
        self.nets.iter().map(Mlp::n_params).sum()
    }

    pub fn set_theta(&mut self, theta: &[f64]) {
        let mut at = 0;
        for net in &mut self.nets {
            let len = net.n_params();
            net.params.copy_from_slice(&theta[at..at + len]);
            at += len;
        }
    }

    fn features<'a>(&self, snapshot: &'a GcrfSnapshot) -> Result<&'a DMatrix<f64>> {
        if snapshot.k() != self.k() || snapshot.l() != self.v.len() {
            return Err(Error::InvalidInput(format!(
                "snapshot has K={} L={}, model expects K={} L={}",
                snapshot.k(),
                snapshot.l(),
                self.k(),
                self.v.len()
            )));
        }
        let x = snapshot.features.as_ref().ok_or(Error::MissingChannel("features"))?;
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(x)
    }

    pub fn alpha(&self, snapshot: &GcrfSnapshot) -> Result<DMatrix<f64>> {
        let x = self.features(snapshot)?;
        let mut alpha = DMatrix::zeros(self.k(), snapshot.n());
        for (k, net) in self.nets.iter().enumerate() {
            for i in 0..snapshot.n() {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                alpha[(k, i)] = net.forward(&row)?.exp();
            }
        }
        Ok(alpha)
    }

    pub fn predict(&self, snapshot: &GcrfSnapshot) -> Result<GcrfPosterior> {
        let alpha = self.alpha(snapshot)?;
        posterior(
            &assemble_precision(&alpha, &self.beta(), snapshot)?,
            &assemble_b(&alpha, snapshot)?,
        )
    }

    pub fn log_likelihood(&self, snapshot: &GcrfSnapshot) -> Result<f64> {
        log_likelihood(&self.alpha(snapshot)?, &self.beta(), snapshot)
    }

    /// Log-likelihood and gradient with respect to the network weights
    /// (concatenated per predictor) and `v`.
    pub fn gradient(&self, snapshot: &GcrfSnapshot) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let x = self.features(snapshot)?;
        let n = snapshot.n();
        let mut alpha = DMatrix::zeros(self.k(), n);
        let mut du_dtheta: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.k());
        for (k, net) in self.nets.iter().enumerate() {
            let mut per_node = Vec::with_capacity(n);
            for i in 0..n {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                let (u, g) = net.backward(&row)?;
                alpha[(k, i)] = u.exp();
                per_node.push(g);
            }
            du_dtheta.push(per_node);
        }
        let beta = self.beta();
        let t = likelihood_terms(&alpha, &beta, snapshot)?;
        let mut dtheta = Vec::with_capacity(self.n_theta());
        for (k, net) in self.nets.iter().enumerate() {
            let mut g = vec![0.0; net.n_params()];
            for i in 0..n {
                let w = t.d_alpha[(k, i)] * alpha[(k, i)];
                for (gj, dj) in g.iter_mut().zip(&du_dtheta[k][i]) {
                    *gj += w * dj;
                }
            }
            dtheta.extend(g);
        }
        let dv = t.d_beta.iter().zip(&beta).map(|(g, b)| g * b).collect();
        Ok((t.value, dtheta, dv))
    }

    pub(crate) fn write_fields(&self, rec: &mut Record) {
        let first = &self.nets[0];
        rec.push("k", self.k());
        rec.push("l", self.v.len());
        rec.push("input_dim", first.input_dim());
        rec.push("hidden", first.hidden());
        rec.push("skip", first.skip());
        rec.push("activation", "tanh");
        for (k, net) in self.nets.iter().enumerate() {
            rec.push_floats(&format!("net{k}"), &net.params);
        }
        rec.push_floats("v", &self.v);
    }

    pub(crate) fn read_fields(rec: &Record) -> Result<Self> {
        let k: usize = rec.parse("k")?;
        let l: usize = rec.parse("l")?;
        let d: usize = rec.parse("input_dim")?;
        let h: usize = rec.parse("hidden")?;
        let skip: bool = rec.parse("skip")?;
        if rec.get("activation")? != "tanh" {
            return Err(Error::Parse("only tanh networks are supported".into()));
        }
        let nets = (0..k)
            .map(|i| Mlp::from_params(d, h, skip, rec.floats(&format!("net{i}"))?))
            .collect::<Result<_>>()?;
        Ok(Self {
            nets,
            v: rec.floats_len("v", l)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UfgcrfOptimizer {
    GradientAscent,
    Lbfgs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UfgcrfTrainConfig {
    pub optimizer: UfgcrfOptimizer,
    pub step: f64,
    pub max_epochs: usize,
    /// Snapshots per update; `None` uses them all.
    pub batch_size: Option<usize>,
    /// Consecutive worsening epochs before the step is halved.
    pub patience: usize,
    pub max_halvings: usize,
    pub gradient_tolerance: f64,
    pub seed: u64,
    pub lbfgs: LbfgsConfig,
    pub freeze_beta: bool,
}

impl Default for UfgcrfTrainConfig {
    fn default() -> Self {
        Self {
            optimizer: UfgcrfOptimizer::GradientAscent,
            step: 1e-2,
            max_epochs: 500,
            batch_size: None,
            patience: 10,
            max_halvings: 5,
            gradient_tolerance: 1e-6,
            seed: 0,
            lbfgs: LbfgsConfig::default(),
            freeze_beta: false,
        }
    }
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn train_ufgcrf(
    snapshots: &[GcrfSnapshot],
    init: &UfgcrfParams,
    cfg: &UfgcrfTrainConfig,
) -> Result<(UfgcrfParams, TrainReport)> {
    if snapshots.is_empty() {
        return Err(Error::InsufficientSamples {
            needed: 1,
            available: 0,
        });
    }
    for s in snapshots {
        s.target()?;
        init.features(s)?;
    }
    let nt = init.n_theta();
    let mut theta0 = init.theta();
    if !cfg.freeze_beta {
        theta0.extend_from_slice(&init.v);
    }
    let unpack = |theta: &[f64]| {
        let mut p = init.clone();
        p.set_theta(&theta[..nt]);
        if !cfg.freeze_beta {
            p.v.copy_from_slice(&theta[nt..]);
        }
        p
    };
    let per_snapshot = |theta: &[f64], s: &GcrfSnapshot| -> Result<(f64, Vec<f64>)> {
        let (ll, mut g, dv) = unpack(theta).gradient(s)?;
        if !cfg.freeze_beta {
            g.extend(dv);
        }
        Ok((ll, g))
    };
    if cfg.optimizer == UfgcrfOptimizer::Lbfgs {
        let (theta, report) = maximize_mean_likelihood(snapshots, &theta0, &cfg.lbfgs, per_snapshot)?;
        return Ok((unpack(&theta), report));
    }

    // Mean per-node log-likelihood over a subset of snapshots.
    let objective = |theta: &[f64], subset: &[usize]| -> Result<(f64, Vec<f64>)> {
        let parts: Vec<(f64, Vec<f64>, f64)> = subset
            .par_iter()
            .map(|&i| {
                let s = &snapshots[i];
                per_snapshot(theta, s).map(|(v, g)| (v, g, s.n() as f64))
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / subset.len() as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for (v, g, n) in parts {
            value += v * scale / n;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b * scale / n;
            }
        }
        Ok((value, grad))
    };
    let all: Vec<usize> = (0..snapshots.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut theta = theta0;
    let (mut value, mut grad) = objective(&theta, &all)?;
    let mut best = (theta.clone(), value);
    let mut step = cfg.step;
    let mut worse = 0;
    let mut halvings = 0;
    let mut epochs = 0;
    let mut termination = Termination::MaxIterations;
    while epochs < cfg.max_epochs {
        if inf_norm(&grad) <= cfg.gradient_tolerance {
            termination = Termination::GradientTolerance;
            break;
        }
        epochs += 1;
        let mut moved = theta.clone();
        let mut failed = false;
        match cfg.batch_size {
            Some(b) if b < snapshots.len() => {
                let mut order = all.clone();
                order.shuffle(&mut rng);
                for chunk in order.chunks(b.max(1)) {
                    match objective(&moved, chunk) {
                        Ok((_, g)) => moved.iter_mut().zip(&g).for_each(|(t, d)| *t += step * d),
                        Err(_) => {
                            failed = true;
                            break;
                        }
                    }
                }
            }
            _ => moved.iter_mut().zip(&grad).for_each(|(t, d)| *t += step * d),
        }
        let evaluated = if failed { None } else { objective(&moved, &all).ok() };
        match evaluated {
            Some((v, g)) if v.is_finite() => {
                worse = if v < value { worse + 1 } else { 0 };
                theta = moved;
                value = v;
                grad = g;
                if value > best.1 {
                    best = (theta.clone(), value);
                }
            }
            _ => worse = cfg.patience,
        }
        if worse >= cfg.patience {
            if halvings == cfg.max_halvings {
                termination = Termination::LineSearchFailed;
                break;
            }
            halvings += 1;
            step *= 0.5;
            worse = 0;
            theta = best.0.clone();
            (value, grad) = objective(&theta, &all)?;
            log::debug!("ufGCRF step halved to {step:e}");
        }
    }
    let params = unpack(&best.0);
    let mean_ll = snapshots
        .iter()
        .map(|s| params.log_likelihood(s))
        .sum::<Result<f64>>()?
        / snapshots.len() as f64;
    Ok((
        params,
        TrainReport {
            termination,
            iterations: epochs,
            mean_log_likelihood: mean_ll,
        },
    ))
}
