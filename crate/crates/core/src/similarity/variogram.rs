use serde::Serialize;

use super::SimilarityMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramConfig {
    pub n_bins: usize,
    /// Bins with fewer pairs are merged into their right neighbour.
    pub min_pairs: usize,
    /// One-sided z threshold on `rho * sqrt(m - 1)` for the decreasing
    /// trend; 0 accepts any negative correlation.
    pub trend_z: f64,
}

impl Default for VariogramConfig {
    fn default() -> Self {
        Self {
            n_bins: 20,
            min_pairs: 10,
            trend_z: 1.645,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Good,
    Bad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VariogramBin {
    pub lower: f64,
    pub upper: f64,
    pub n_pairs: usize,
    /// Mean of `(y_i - y_j)^2 / 2` over the bin's pairs.
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariogramReport {
    pub bins: Vec<VariogramBin>,
    pub overall_variance: f64,
    pub spearman: f64,
    pub verdict: Verdict,
}

impl VariogramReport {
    pub fn gamma(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.gamma).collect()
    }

    pub fn n_pairs(&self) -> Vec<usize> {
        self.bins.iter().map(|b| b.n_pairs).collect()
    }
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Semivariance of target differences binned by pair similarity, over all
/// node pairs with finite targets.
pub fn variogram(
    similarity: &SimilarityMatrix,
    targets: &[f64],
    cfg: &VariogramConfig,
) -> Result<VariogramReport> {
    let n = similarity.n();
    if targets.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: targets.len(),
        });
    }
    if cfg.n_bins < 2 {
        return Err(Error::InvalidInput("variogram needs at least 2 bins".into()));
    }
    let observed: Vec<usize> = (0..n).filter(|&i| targets[i].is_finite()).collect();
    let mut pairs = Vec::with_capacity(observed.len() * observed.len().saturating_sub(1) / 2);
    for (a, &i) in observed.iter().enumerate() {
        for &j in &observed[a + 1..] {
            pairs.push((similarity.get(i, j), 0.5 * (targets[i] - targets[j]).powi(2)));
        }
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientSamples {
            needed: 2,
            available: observed.len(),
        });
    }
    let lo = pairs.iter().fold(f64::INFINITY, |m, p| m.min(p.0));
    let hi = pairs.iter().fold(f64::NEG_INFINITY, |m, p| m.max(p.0));
    if hi <= lo {
        return Err(Error::DegenerateSimilarity);
    }

    let width = (hi - lo) / cfg.n_bins as f64;
    let mut counts = vec![0usize; cfg.n_bins];
    let mut sums = vec![0.0; cfg.n_bins];
    for &(s, g) in &pairs {
        let b = (((s - lo) / width) as usize).min(cfg.n_bins - 1);
        counts[b] += 1;
        sums[b] += g;
    }

    let mut bins: Vec<VariogramBin> = Vec::new();
    let mut open: Option<(f64, usize, f64)> = None;
    for b in 0..cfg.n_bins {
        let lower = lo + width * b as f64;
        let (start, c, sum) = match open.take() {
            Some((start, c, sum)) => (start, c + counts[b], sum + sums[b]),
            None => (lower, counts[b], sums[b]),
        };
        let upper = if b + 1 == cfg.n_bins { hi } else { lo + width * (b + 1) as f64 };
        if c >= cfg.min_pairs.max(1) {
            bins.push(VariogramBin {
                lower: start,
                upper,
                n_pairs: c,
                gamma: sum / c as f64,
            });
        } else {
            open = Some((start, c, sum));
        }
    }
    if let Some((start, c, sum)) = open {
        if c > 0 {
            match bins.last_mut() {
                Some(last) => {
                    let total = last.n_pairs + c;
                    last.gamma = (last.gamma * last.n_pairs as f64 + sum) / total as f64;
                    last.n_pairs = total;
                    last.upper = hi;
                }
                None => bins.push(VariogramBin {
                    lower: start,
                    upper: hi,
                    n_pairs: c,
                    gamma: sum / c as f64,
                }),
            }
        }
    }

    let vals: Vec<f64> = observed.iter().map(|&i| targets[i]).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let overall_variance = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;

    let index: Vec<f64> = (0..bins.len()).map(|i| i as f64).collect();
    let gamma: Vec<f64> = bins.iter().map(|b| b.gamma).collect();
    let rho = spearman(&index, &gamma);
    let verdict = if overall_variance == 0.0 {
        Verdict::Good
    } else {
        let top = *gamma.last().unwrap();
        let trend = bins.len() >= 2 && rho < 0.0 && rho * ((bins.len() - 1) as f64).sqrt() < -cfg.trend_z;
        if top < overall_variance && trend {
            Verdict::Good
        } else {
            Verdict::Bad
        }
    };
    Ok(VariogramReport {
        bins,
        overall_variance,
        spearman: rho,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::SimilarityKind;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_similarity(n: usize, seed: u64) -> SimilarityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let s: f64 = rng.random();
                v[(i, j)] = s;
                v[(j, i)] = s;
            }
        }
        SimilarityMatrix::new(v, SimilarityKind::Given, None).unwrap()
    }

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        // ranks of y: 1, 2.5, 2.5, 4
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 5.0, 5.0, 9.0]);
        let oracle = 4.5 / (5.0f64 * 4.5).sqrt();
        assert!((r - oracle).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[4.0, 4.0]), 0.0);
    }

    #[test]
    fn equal_targets_are_good() {
        let s = random_similarity(30, 1);
        let rep = variogram(&s, &[0.5; 30], &VariogramConfig::default()).unwrap();
        assert!(rep.gamma().iter().all(|g| *g == 0.0));
        assert_eq!(rep.verdict, Verdict::Good);
    }

    #[test]
    fn degenerate_similarity_rejected() {
        let v = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 0.3 });
        let s = SimilarityMatrix::new(v, SimilarityKind::Given, None).unwrap();
        let e = variogram(&s, &[1.0, 2.0, 3.0, 4.0], &VariogramConfig::default()).unwrap_err();
        assert!(e.to_string().contains("degenerate similarity"));
    }

    #[test]
    fn matches_pair_enumeration() {
        let n = 40;
        let s = random_similarity(n, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let cfg = VariogramConfig::default();
        let rep = variogram(&s, &y, &cfg).unwrap();
        assert_eq!(rep.n_pairs().iter().sum::<usize>(), n * (n - 1) / 2);
        for b in &rep.bins {
            assert!(b.n_pairs >= cfg.min_pairs);
            let mut sum = 0.0;
            let mut c = 0;
            for i in 0..n {
                for j in i + 1..n {
                    let v = s.get(i, j);
                    let inside = v >= b.lower && (v < b.upper || (b.upper - rep.bins.last().unwrap().upper).abs() < 1e-15);
                    if inside {
                        sum += (y[i] - y[j]).powi(2) / 2.0;
                        c += 1;
                    }
                }
            }
            assert_eq!(c, b.n_pairs);
            assert!((sum / c as f64 - b.gamma).abs() < 1e-12);
        }
    }

    #[test]
    fn random_similarity_is_bad() {
        let n = 60;
        let mut bad = 0;
        for seed in 0..20 {
            let s = random_similarity(n, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            if variogram(&s, &y, &VariogramConfig::default()).unwrap().verdict == Verdict::Bad {
                bad += 1;
            }
        }
        assert!(bad >= 17, "only {bad}/20 random similarities judged bad");
    }

    #[test]
    fn homophilous_similarity_is_good() {
        let n = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let v = DMatrix::from_fn(n, n, |i, j| (-(y[i] - y[j]).abs() * 5.0).exp());
        let s = SimilarityMatrix::new(v, SimilarityKind::Given, None).unwrap();
        let rep = variogram(&s, &y, &VariogramConfig::default()).unwrap();
        assert_eq!(rep.verdict, Verdict::Good);
        assert!(rep.spearman < -0.9);
    }

    #[test]
    fn invariant_to_node_order() {
        let n = 30;
        let s = random_similarity(n, 5);
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7) % n).collect();
        let sp = SimilarityMatrix::new(
            DMatrix::from_fn(n, n, |i, j| s.get(perm[i], perm[j])),
            SimilarityKind::Given,
            None,
        )
        .unwrap();
        let yp: Vec<f64> = perm.iter().map(|&p| y[p]).collect();
        let cfg = VariogramConfig::default();
        let a = variogram(&s, &y, &cfg).unwrap();
        let b = variogram(&sp, &yp, &cfg).unwrap();
        assert_eq!(a.n_pairs(), b.n_pairs());
        for (x, z) in a.gamma().iter().zip(b.gamma()) {
            assert!((x - z).abs() < 1e-12);
        }
    }
}
