use nalgebra::DMatrix;

use crate::dataset::LagFeatureMatrix;
use crate::error::{Error, Result};
use crate::gcrf::{
    likelihood_terms, log_likelihood, maximize_mean_likelihood, assemble_b, assemble_precision,
    posterior, GcrfPosterior, GcrfSnapshot, TrainConfig, TrainReport,
};
use crate::predictors::{floor_variance, Predictor};
use crate::textfmt::Record;

/// Lower bound on the coverage-quality index.
pub const CI_FLOOR: f64 = 0.01;

/// Fraction of points inside their 95% interval, floored at [`CI_FLOOR`].
pub fn coverage_index(means: &[f64], variances: &[f64], truths: &[f64]) -> Result<f64> {
    if means.is_empty() {
        return Err(Error::InvalidInput("empty validation window".into()));
    }
    if means.len() != truths.len() || variances.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            got: means.len().min(variances.len()),
        });
    }
    let inside = means
        .iter()
        .zip(variances)
        .zip(truths)
        .filter(|((m, v), y)| (*y - *m).abs() <= 1.96 * floor_variance(**v).sqrt())
        .count();
    Ok((inside as f64 / truths.len() as f64).max(CI_FLOOR))
}

/// Coverage index of a fitted base predictor over a validation design.
pub fn compute_ci_index<P: Predictor + ?Sized>(predictor: &P, validation: &LagFeatureMatrix) -> Result<f64> {
    let mut means = Vec::with_capacity(validation.len());
    let mut vars = Vec::with_capacity(validation.len());
    for x in &validation.features {
        let p = predictor.predict(x)?;
        means.push(p.mean);
        vars.push(p.variance);
    }
    coverage_index(&means, &vars, &validation.labels)
}

/// `alpha = e^u * ci / sigma2`.
pub fn ugcrf_alpha(u: f64, ci: f64, sigma2: f64) -> f64 {
    u.exp() * ci / floor_variance(sigma2)
}

/// Association weights scaled by each base predictor's own variance.
#[derive(Debug, Clone, PartialEq)]
pub struct UgcrfParams {
    pub k: usize,
    pub horizons: usize,
    /// One `u_k` for all horizons instead of one `u_{k,p}` per horizon.
    pub shared_u: bool,
    /// `u[k * horizons + (p - 1)]`, or `u[k]` when shared.
    pub u: Vec<f64>,
    /// `ci[k * horizons + (p - 1)]`
    pub ci: Vec<f64>,
    pub v: Vec<f64>,
}

impl UgcrfParams {
    pub fn init(k: usize, horizons: usize, l: usize, ci: Vec<f64>, shared_u: bool) -> Result<Self> {
        if horizons == 0 {
            return Err(Error::InvalidInput("need at least one horizon".into()));
        }
        if ci.len() != k * horizons {
            return Err(Error::DimensionMismatch {
                expected: k * horizons,
                got: ci.len(),
            });
        }
        if ci.iter().any(|c| !(*c > 0.0 && *c <= 1.0)) {
            return Err(Error::InvalidInput("ci values must lie in (0, 1]".into()));
        }
        Ok(Self {
            k,
            horizons,
            shared_u,
            u: vec![0.0; if shared_u { k } else { k * horizons }],
            ci,
            v: vec![0.0; l],
        })
    }

    pub fn beta(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.exp()).collect()
    }

    fn u_index(&self, k: usize, p: usize) -> usize {
        if self.shared_u {
            k
        } else {
            k * self.horizons + p - 1
        }
    }

    fn horizon_of(&self, snapshot: &GcrfSnapshot) -> Result<usize> {
        let p = snapshot.horizon;
        if p == 0 || p > self.horizons {
            return Err(Error::InvalidInput(format!(
                "snapshot horizon {p} outside 1..={}",
                self.horizons
            )));
        }
        if snapshot.k() != self.k || snapshot.l() != self.v.len() {
            return Err(Error::InvalidInput(format!(
                "snapshot has K={} L={}, model expects K={} L={}",
                snapshot.k(),
                snapshot.l(),
                self.k,
                self.v.len()
            )));
        }
        Ok(p)
    }

    pub fn alpha(&self, snapshot: &GcrfSnapshot) -> Result<DMatrix<f64>> {
        let p = self.horizon_of(snapshot)?;
        let var = snapshot.variances.as_ref().ok_or(Error::MissingChannel("variance"))?;
        Ok(DMatrix::from_fn(self.k, snapshot.n(), |k, i| {
            ugcrf_alpha(
                self.u[self.u_index(k, p)],
                self.ci[k * self.horizons + p - 1],
                var[(k, i)],
            )
        }))
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

    /// Log-likelihood and gradient with respect to `(u, v)`.
    pub fn gradient(&self, snapshot: &GcrfSnapshot) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let p = self.horizon_of(snapshot)?;
        let alpha = self.alpha(snapshot)?;
        let beta = self.beta();
        let t = likelihood_terms(&alpha, &beta, snapshot)?;
        let mut du = vec![0.0; self.u.len()];
        for k in 0..self.k {
            du[self.u_index(k, p)] += t.d_alpha.row(k).dot(&alpha.row(k));
        }
        let dv = t.d_beta.iter().zip(&beta).map(|(g, b)| g * b).collect();
        Ok((t.value, du, dv))
    }

    pub(crate) fn write_fields(&self, rec: &mut Record) {
        rec.push("k", self.k);
        rec.push("horizons", self.horizons);
        rec.push("shared_u", self.shared_u);
        rec.push("l", self.v.len());
        rec.push_floats("u", &self.u);
        rec.push_floats("ci", &self.ci);
        rec.push_floats("v", &self.v);
    }

    pub(crate) fn read_fields(rec: &Record) -> Result<Self> {
        let k: usize = rec.parse("k")?;
        let horizons: usize = rec.parse("horizons")?;
        let shared_u: bool = rec.parse("shared_u")?;
        let l: usize = rec.parse("l")?;
        let mut p = Self::init(k, horizons, l, rec.floats_len("ci", k * horizons)?, shared_u)?;
        p.u = rec.floats_len("u", p.u.len())?;
        p.v = rec.floats_len("v", l)?;
        Ok(p)
    }
}

/// Fit `(u, v)` with the `ci` table held fixed.
pub fn train_ugcrf(
    snapshots: &[GcrfSnapshot],
    init: &UgcrfParams,
    cfg: &TrainConfig,
) -> Result<(UgcrfParams, TrainReport)> {
    for s in snapshots {
        if s.variances.is_none() {
            return Err(Error::MissingChannel("variance"));
        }
    }
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

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use crate::gcrf::{train_gcrf, AlphaMode, GcrfParams};
    use crate::predictors::PredictiveDistribution;
    use crate::similarity::{SimilarityKind, SimilarityMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    #[test]
    fn alpha_formula() {
        assert_eq!(ugcrf_alpha(0.0, 1.0, 1.0), 1.0);
        assert!((ugcrf_alpha(0.0, 0.5, 0.25) - 2.0).abs() < 1e-15);
        let a = ugcrf_alpha(0.7, 0.8, 0.3);
        assert!((ugcrf_alpha(0.7, 0.8, 0.6) - a / 2.0).abs() < 1e-15);
        assert!(ugcrf_alpha(0.7, 0.9, 0.3) > a);
    }

    struct Fixed(f64, f64);

    impl Predictor for Fixed {
        fn n_features(&self) -> usize {
            1
        }
        fn predict(&self, x: &[f64]) -> Result<PredictiveDistribution> {
            Ok(PredictiveDistribution::new(x[0] * self.0, self.1))
        }
    }

    #[test]
    fn ci_index_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 10000;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let labels: Vec<f64> = xs.iter().map(|x| x[0] + 0.5 * gauss(&mut rng)).collect();
        let val = LagFeatureMatrix {
            lag: 1,
            rows: (0..n).collect(),
            features: xs,
            labels,
        };
        let ci = compute_ci_index(&Fixed(1.0, 0.25), &val).unwrap();
        assert!((0.93..=0.97).contains(&ci), "{ci}");
        assert_eq!(compute_ci_index(&Fixed(0.0, 0.0), &val).unwrap(), CI_FLOOR);
        assert_eq!(compute_ci_index(&Fixed(1.0, 1e6), &val).unwrap(), 1.0);
        let empty = LagFeatureMatrix {
            lag: 1,
            rows: vec![],
            features: vec![],
            labels: vec![],
        };
        assert!(compute_ci_index(&Fixed(1.0, 1.0), &empty).is_err());
    }

    fn random_snapshot(rng: &mut ChaCha8Rng, n: usize, k: usize, horizon: usize) -> GcrfSnapshot {
        let mut s = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.5) {
                    let w = rng.random_range(0.1..1.0);
                    s[(i, j)] = w;
                    s[(j, i)] = w;
                }
            }
        }
        let sim = SimilarityMatrix::new(s, SimilarityKind::Given, None).unwrap();
        GcrfSnapshot::new(DMatrix::from_fn(k, n, |_, _| gauss(rng)), vec![sim])
            .unwrap()
            .with_target(DVector::from_fn(n, |_, _| gauss(rng)))
            .unwrap()
            .with_variances(DMatrix::from_fn(k, n, |_, _| rng.random_range(0.1..2.0)))
            .unwrap()
            .with_horizon(horizon)
    }

    #[test]
    fn gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for shared in [false, true] {
            let snap = random_snapshot(&mut rng, 6, 2, 2);
            let mut p = UgcrfParams::init(2, 3, 1, vec![0.9, 0.8, 0.7, 0.95, 0.5, 0.6], shared).unwrap();
            for u in &mut p.u {
                *u = rng.random_range(-1.0..1.0);
            }
            p.v[0] = 0.3;
            let (_, du, dv) = p.gradient(&snap).unwrap();
            let h = 1e-6;
            for i in 0..p.u.len() {
                let mut a = p.clone();
                let mut b = p.clone();
                a.u[i] += h;
                b.u[i] -= h;
                let fd = (a.log_likelihood(&snap).unwrap() - b.log_likelihood(&snap).unwrap()) / (2.0 * h);
                assert!((fd - du[i]).abs() / du[i].abs().max(1.0) < 1e-5);
            }
            let mut a = p.clone();
            let mut b = p.clone();
            a.v[0] += h;
            b.v[0] -= h;
            let fd = (a.log_likelihood(&snap).unwrap() - b.log_likelihood(&snap).unwrap()) / (2.0 * h);
            assert!((fd - dv[0]).abs() / dv[0].abs().max(1.0) < 1e-5);
        }
    }

    #[test]
    fn equal_variances_reduce_to_gcrf() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let snaps: Vec<GcrfSnapshot> = (0..10)
            .map(|_| {
                let s = random_snapshot(&mut rng, 5, 2, 1);
                let v = DMatrix::from_element(2, 5, 0.4);
                s.with_variances(v).unwrap()
            })
            .collect();
        let cfg = TrainConfig::default();
        let (g, _) = train_gcrf(&snaps, &GcrfParams::init(AlphaMode::Shared, 2, 5, 1), &cfg).unwrap();
        let init = UgcrfParams::init(2, 1, 1, vec![0.8, 0.6], false).unwrap();
        let (u, _) = train_ugcrf(&snaps, &init, &cfg).unwrap();
        let ga = g.alpha(5).unwrap();
        let ua = u.alpha(&snaps[0]).unwrap();
        for k in 0..2 {
            assert!((ga[(k, 0)] - ua[(k, 0)]).abs() / ga[(k, 0)] < 1e-4);
        }
        let pg = g.predict(&snaps[0]).unwrap();
        let pu = u.predict(&snaps[0]).unwrap();
        assert!((pg.mu - pu.mu).amax() < 1e-5);
    }

    #[test]
    fn shared_u_alpha_falls_with_horizon_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let p = UgcrfParams::init(1, 3, 1, vec![0.9; 3], true).unwrap();
        let mut last = f64::INFINITY;
        for h in 1..=3 {
            let s = random_snapshot(&mut rng, 4, 1, h)
                .with_variances(DMatrix::from_element(1, 4, 0.1 * h as f64))
                .unwrap();
            let a = p.alpha(&s).unwrap()[(0, 0)];
            assert!(a <= last);
            last = a;
        }
    }

    #[test]
    fn missing_variances_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut s = random_snapshot(&mut rng, 4, 1, 1);
        s.variances = None;
        let p = UgcrfParams::init(1, 1, 1, vec![1.0], false).unwrap();
        assert!(matches!(p.predict(&s), Err(Error::MissingChannel("variance"))));
        assert!(train_ugcrf(&[s], &p, &TrainConfig::default()).is_err());
        let far = random_snapshot(&mut rng, 4, 1, 2);
        assert!(p.predict(&far).is_err());
    }

    #[test]
    fn constant_variance_predictor_loses_weight_where_it_is_noisy() {
        // predictor 0 reports its true variance; predictor 1 reports a
        // constant one while its true noise is large exactly where
        // predictor 0 is quiet
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let n = 20;
        let noise = |k: usize, i: usize| -> f64 { if (i < n / 2) == (k == 0) { 0.05 } else { 1.0 } };
        let snaps: Vec<GcrfSnapshot> = (0..60)
            .map(|_| {
                let y = DVector::from_fn(n, |_, _| gauss(&mut rng));
                let preds = DMatrix::from_fn(2, n, |k, i| y[i] + noise(k, i).sqrt() * gauss(&mut rng));
                let vars = DMatrix::from_fn(2, n, |k, i| if k == 0 { noise(0, i) } else { 0.525 });
                GcrfSnapshot::new(preds, vec![SimilarityMatrix::empty(n, SimilarityKind::Given)])
                    .unwrap()
                    .with_target(y)
                    .unwrap()
                    .with_variances(vars)
                    .unwrap()
            })
            .collect();
        let init = UgcrfParams::init(2, 1, 1, vec![0.95, 0.95], false).unwrap();
        let (p, _) = train_ugcrf(&snaps, &init, &TrainConfig::default()).unwrap();
        let a = p.alpha(&snaps[0]).unwrap();
        let share = |i: usize| a[(1, i)] / (a[(0, i)] + a[(1, i)]);
        for i in 0..n / 2 {
            for j in n / 2..n {
                assert!(share(i) < share(j));
            }
        }
        assert!(share(0) < 0.5 && share(n - 1) > 0.5);
    }
}
