//! Limited-memory BFGS with a monotone backtracking line search.

use std::collections::VecDeque;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub max_iterations: usize,
    pub memory: usize,
    /// Stop when the largest gradient component falls below this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step improves the objective by less than
    /// this fraction of its magnitude.
    pub function_tolerance: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            memory: 10,
            gradient_tolerance: 1e-6,
            function_tolerance: 1e-14,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Termination {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    LineSearchFailed,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(self, Termination::GradientTolerance | Termination::FunctionTolerance)
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective value after each accepted iteration, starting with `x0`.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimize `f`, which returns the value and gradient at a point. Points where
/// `f` errors or returns a non-finite value are treated as infeasible and the
/// line search backs off from them.
pub fn minimize<F>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    let mut trace = vec![fx];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        if inf_norm(&g) <= cfg.gradient_tolerance {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut dir = two_loop(&g, &history);
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if history.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if history.is_empty() {
                termination = Termination::LineSearchFailed;
                break;
            }
            history.clear();
            continue;
        };
        iterations += 1;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let improvement = fx - fnew;
        x = xn;
        fx = fnew;
        g = gn;
        trace.push(fx);
        if improvement <= cfg.function_tolerance * fx.abs().max(1.0) {
            termination = if inf_norm(&g) <= cfg.gradient_tolerance {
                Termination::GradientTolerance
            } else {
                Termination::FunctionTolerance
            };
            break;
        }
    }
    if termination == Termination::MaxIterations && inf_norm(&g) <= cfg.gradient_tolerance {
        termination = Termination::GradientTolerance;
    }
    Ok(Minimum {
        x,
        value: fx,
        gradient: g,
        iterations,
        termination,
        trace,
    })
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Ok((v, g))
        };
        let cfg = LbfgsConfig {
            max_iterations: 1000,
            ..Default::default()
        };
        let m = minimize(f, &[-1.2, 1.0], &cfg).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{:?}", m.x);
        assert!(m.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_converges_on_gradient() {
        let f = |x: &[f64]| {
            let v: f64 = x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v * v).sum();
            Ok((v, x.iter().enumerate().map(|(i, v)| 2.0 * (i + 1) as f64 * v).collect()))
        };
        let m = minimize(f, &[1.0, -2.0, 3.0, 0.5], &LbfgsConfig::default()).unwrap();
        assert!(m.termination.converged());
        assert!(m.x.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn infeasible_region_is_avoided() {
        // -log(x) + x, minimum at 1, undefined for x <= 0
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                return Err(crate::Error::InvalidInput("x<=0".into()));
            }
            Ok((-x[0].ln() + x[0], vec![-1.0 / x[0] + 1.0]))
        };
        let m = minimize(f, &[0.01], &LbfgsConfig::default()).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-5);
    }
}
