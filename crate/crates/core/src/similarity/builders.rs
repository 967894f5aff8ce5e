use std::collections::HashMap;

use nalgebra::DMatrix;

use super::{SimilarityKind, SimilarityMatrix};
use crate::dataset::TemporalGraphDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoMeasure {
    /// Number of records containing both codes.
    Count,
    /// Records containing both over records containing either.
    Jaccard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownCodePolicy {
    #[default]
    Fail,
    Skip,
}

/// Co-occurrence similarity from records that each list a set of codes.
pub fn comorbidity_similarity<I, R, S>(
    node_ids: &[String],
    records: I,
    measure: CoMeasure,
    unknown: UnknownCodePolicy,
) -> Result<SimilarityMatrix>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let n = node_ids.len();
    let index: HashMap<&str, usize> = node_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut both = DMatrix::<f64>::zeros(n, n);
    let mut single = vec![0.0; n];
    for (r, record) in records.into_iter().enumerate() {
        let mut codes = Vec::new();
        let mut listed = 0;
        for code in record {
            listed += 1;
            match index.get(code.as_ref()) {
                Some(&i) => codes.push(i),
                None if unknown == UnknownCodePolicy::Skip => {}
                None => {
                    return Err(Error::UnknownNode(format!(
                        "{} (record {r})",
                        code.as_ref()
                    )))
                }
            }
        }
        if listed == 0 {
            return Err(Error::InvalidInput(format!("record {r} lists no codes")));
        }
        codes.sort_unstable();
        codes.dedup();
        for (a, &i) in codes.iter().enumerate() {
            single[i] += 1.0;
            for &j in &codes[a + 1..] {
                both[(i, j)] += 1.0;
                both[(j, i)] += 1.0;
            }
        }
    }
    let values = match measure {
        CoMeasure::Count => both,
        CoMeasure::Jaccard => DMatrix::from_fn(n, n, |i, j| {
            let union = single[i] + single[j] - both[(i, j)];
            if i == j || union == 0.0 {
                0.0
            } else {
                both[(i, j)] / union
            }
        }),
    };
    SimilarityMatrix::new(values, SimilarityKind::Comorbidity, None)
}

/// Smallest divergence used when inverting; caps similarity at `1 / JSD_MIN`.
pub const JSD_MIN: f64 = 1e-6;

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, mi)| pi * (pi / mi).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * (kl_to_mixture(p, &m) + kl_to_mixture(q, &m))
}

fn check_histogram(h: &[f64], node: usize, bins: usize) -> Result<()> {
    if h.len() != bins {
        return Err(Error::DimensionMismatch {
            expected: bins,
            got: h.len(),
        });
    }
    if h.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput(format!("histogram {node} has a negative bin")));
    }
    let total: f64 = h.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidInput(format!(
            "histogram {node} sums to {total}, not 1"
        )));
    }
    Ok(())
}

/// `S_ij = 1 / JSD(P_i || P_j)`, capped at `1 / JSD_MIN`.
pub fn js_divergence_similarity(histograms: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    let n = histograms.len();
    let bins = histograms.first().map_or(0, Vec::len);
    for (i, h) in histograms.iter().enumerate() {
        check_histogram(h, i, bins)?;
    }
    let mut values = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = js_divergence(&histograms[i], &histograms[j]);
            debug_assert!(d <= std::f64::consts::LN_2 + 1e-12, "JSD {d} above ln 2");
            let s = 1.0 / d.max(JSD_MIN);
            values[(i, j)] = s;
            values[(j, i)] = s;
        }
    }
    SimilarityMatrix::new(values, SimilarityKind::JsDivergence, None)
}

/// Per-node normalized histograms of an attribute over timestep rows
/// `rows`, on shared equal-width bins spanning all nodes' values.
pub fn histograms_from_attribute(
    dataset: &TemporalGraphDataset,
    attribute: &str,
    rows: std::ops::Range<usize>,
    bins: usize,
) -> Result<Vec<Vec<f64>>> {
    if bins == 0 {
        return Err(Error::InvalidInput("need at least one bin".into()));
    }
    let grid = dataset.attribute(attribute)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in rows.clone() {
        for v in grid.row(t).iter().filter(|v| v.is_finite()) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if !lo.is_finite() {
        return Err(Error::InvalidInput(format!("attribute {attribute} unobserved in window")));
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    (0..dataset.n_nodes())
        .map(|node| {
            let mut h = vec![0.0; bins];
            let mut total = 0.0;
            for t in rows.clone() {
                let v = grid[(t, node)];
                if v.is_finite() {
                    let b = (((v - lo) / width) as usize).min(bins - 1);
                    h[b] += 1.0;
                    total += 1.0;
                }
            }
            if total == 0.0 {
                return Err(Error::InvalidInput(format!(
                    "node {} has no {attribute} values in window",
                    dataset.node_ids()[node]
                )));
            }
            Ok(h.into_iter().map(|c| c / total).collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HistoryVariant {
    /// `exp(-mean_s |x_i - x_j|)`
    #[default]
    MeanAbsolute,
    /// `exp(-|mean_s (x_i - x_j)|)`, the two-step expansion form.
    AbsoluteOfMean,
}

impl std::fmt::Display for HistoryVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HistoryVariant::MeanAbsolute => "mean-absolute",
            HistoryVariant::AbsoluteOfMean => "absolute-of-mean",
        })
    }
}

impl std::str::FromStr for HistoryVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean-absolute" => Ok(HistoryVariant::MeanAbsolute),
            "absolute-of-mean" => Ok(HistoryVariant::AbsoluteOfMean),
            other => Err(Error::Parse(format!("unknown history variant {other}"))),
        }
    }
}

/// `S_ij = exp(-(1/h) sum_{s=1..h} |x_i[t-s] - x_j[t-s]|)` for timestep row `t`.
pub fn common_history_similarity(
    dataset: &TemporalGraphDataset,
    attribute: &str,
    h: usize,
    t: usize,
    variant: HistoryVariant,
) -> Result<SimilarityMatrix> {
    if h == 0 {
        return Err(Error::InvalidInput("history length must be at least 1".into()));
    }
    if t < h || t > dataset.n_timesteps() {
        return Err(Error::InsufficientSamples {
            needed: h,
            available: t.min(dataset.n_timesteps()),
        });
    }
    let grid = dataset.attribute(attribute)?;
    let n = dataset.n_nodes();
    let hist: Vec<Vec<f64>> = (0..n)
        .map(|node| (1..=h).map(|s| grid[(t - s, node)]).collect())
        .collect();
    for (node, x) in hist.iter().enumerate() {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{attribute} unobserved for node {} in history window",
                dataset.node_ids()[node]
            )));
        }
    }
    let mut values = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = match variant {
                HistoryVariant::MeanAbsolute => {
                    hist[i].iter().zip(&hist[j]).map(|(a, b)| (a - b).abs()).sum::<f64>() / h as f64
                }
                HistoryVariant::AbsoluteOfMean => {
                    (hist[i].iter().zip(&hist[j]).map(|(a, b)| a - b).sum::<f64>() / h as f64).abs()
                }
            };
            let s = (-d).exp();
            values[(i, j)] = s;
            values[(j, i)] = s;
        }
    }
    let label = dataset.timesteps().get(t).copied();
    SimilarityMatrix::new(values, SimilarityKind::CommonHistory, label)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsifyRule {
    /// Keep each node's `k` strongest edges; an edge survives if either end keeps it.
    TopK(usize),
    /// Keep edges with `s >= threshold`.
    Threshold(f64),
}

impl std::fmt::Display for SparsifyRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SparsifyRule::TopK(k) => write!(f, "top-k:{k}"),
            SparsifyRule::Threshold(x) => write!(f, "threshold:{x}"),
        }
    }
}

/// `top-k:K` or `threshold:X`.
impl std::str::FromStr for SparsifyRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad sparsify rule {s:?}"));
        let (kind, arg) = s.trim().split_once(':').ok_or_else(bad)?;
        match kind {
            "top-k" => arg.parse().map(SparsifyRule::TopK).map_err(|_| bad()),
            "threshold" => arg.parse().map(SparsifyRule::Threshold).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

pub fn sparsify(similarity: &SimilarityMatrix, rule: SparsifyRule) -> Result<SimilarityMatrix> {
    let n = similarity.n();
    let s = similarity.values();
    let mut keep = DMatrix::from_element(n, n, false);
    match rule {
        SparsifyRule::TopK(k) => {
            if k == 0 {
                return Err(Error::InvalidInput("top-k needs k >= 1".into()));
            }
            for i in 0..n {
                let mut nbrs: Vec<usize> = (0..n).filter(|&j| j != i && s[(i, j)] > 0.0).collect();
                nbrs.sort_by(|&a, &b| s[(i, b)].total_cmp(&s[(i, a)]).then(a.cmp(&b)));
                for &j in nbrs.iter().take(k) {
                    keep[(i, j)] = true;
                    keep[(j, i)] = true;
                }
            }
        }
        SparsifyRule::Threshold(th) => {
            if !(th >= 0.0) {
                return Err(Error::InvalidInput("threshold must be nonnegative".into()));
            }
            for i in 0..n {
                for j in 0..n {
                    keep[(i, j)] = s[(i, j)] >= th;
                }
            }
        }
    }
    let values = DMatrix::from_fn(n, n, |i, j| if keep[(i, j)] { s[(i, j)] } else { 0.0 });
    SimilarityMatrix::new(values, similarity.kind(), similarity.timestep())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn comorbidity_counts() {
        let recs = vec![vec!["A", "B"], vec!["A", "B"], vec!["A", "C"]];
        let s = comorbidity_similarity(&ids(&["A", "B", "C"]), recs, CoMeasure::Count, UnknownCodePolicy::Fail).unwrap();
        assert_eq!(s.get(0, 1), 2.0);
        assert_eq!(s.get(0, 2), 1.0);
        assert_eq!(s.get(1, 2), 0.0);
        assert_eq!(s.get(0, 0), 0.0);
    }

    #[test]
    fn comorbidity_jaccard() {
        let recs = vec![vec!["A", "B"], vec!["A", "B"], vec!["A", "C"]];
        let s = comorbidity_similarity(&ids(&["A", "B", "C"]), recs, CoMeasure::Jaccard, UnknownCodePolicy::Fail).unwrap();
        assert!((s.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.get(1, 2), 0.0);
    }

    #[test]
    fn singleton_records_have_no_edges() {
        let recs = vec![vec!["A"], vec!["B"], vec!["C"], vec!["A"]];
        let s = comorbidity_similarity(&ids(&["A", "B", "C"]), recs, CoMeasure::Count, UnknownCodePolicy::Fail).unwrap();
        assert!(s.edges().is_empty());
    }

    #[test]
    fn unknown_codes_fail_or_skip() {
        let recs = vec![vec!["A", "Z"], vec!["A", "B"]];
        assert!(comorbidity_similarity(&ids(&["A", "B"]), recs.clone(), CoMeasure::Count, UnknownCodePolicy::Fail).is_err());
        let s = comorbidity_similarity(&ids(&["A", "B"]), recs, CoMeasure::Count, UnknownCodePolicy::Skip).unwrap();
        assert_eq!(s.get(0, 1), 1.0);
    }

    #[test]
    fn jsd_disjoint_is_ln2() {
        // M = (1/2, 1/2); KLD(P||M) = ln 2 = KLD(Q||M)
        let d = js_divergence(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((d - std::f64::consts::LN_2).abs() < 1e-15);
        let s = js_divergence_similarity(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((s.get(0, 1) - 1.0 / std::f64::consts::LN_2).abs() < 1e-12);
        assert!((s.get(0, 1) - 1.4427).abs() < 1e-4);
    }

    #[test]
    fn jsd_identical_is_capped() {
        let s = js_divergence_similarity(&[vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        assert_eq!(s.get(0, 1), 1.0 / JSD_MIN);
    }

    #[test]
    fn jsd_monotone_in_distance() {
        let base = vec![0.5, 0.5];
        let near = vec![0.55, 0.45];
        let far = vec![0.9, 0.1];
        let s = js_divergence_similarity(&[base, near, far]).unwrap();
        assert!(s.get(0, 1) > s.get(0, 2));
    }

    #[test]
    fn jsd_rejects_bad_histograms() {
        assert!(js_divergence_similarity(&[vec![0.5, 0.6], vec![0.5, 0.5]]).is_err());
        assert!(js_divergence_similarity(&[vec![1.5, -0.5], vec![0.5, 0.5]]).is_err());
    }

    fn history_dataset(cols: &[&[f64]]) -> TemporalGraphDataset {
        let t = cols[0].len();
        let flat: Vec<f64> = cols.iter().flat_map(|c| c.iter().copied()).collect();
        TemporalGraphDataset::from_dense(
            (0..cols.len()).map(|i| format!("n{i}")).collect(),
            (0..t as i64).collect(),
            DMatrix::from_column_slice(t, cols.len(), &flat),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn history_two_steps() {
        // rows are t-2, t-1 and the (unused) current step
        let ds = history_dataset(&[&[0.4, 0.2, 9.0], &[0.0, 0.6, 9.0]]);
        let s = common_history_similarity(&ds, "target", 2, 2, HistoryVariant::MeanAbsolute).unwrap();
        assert!((s.get(0, 1) - (-0.4f64).exp()).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.6703).abs() < 1e-4);
        // opposite-signed differences cancel in the expansion form
        let e = common_history_similarity(&ds, "target", 2, 2, HistoryVariant::AbsoluteOfMean).unwrap();
        assert!((e.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn history_identical_and_insufficient() {
        let ds = history_dataset(&[&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]]);
        let s = common_history_similarity(&ds, "target", 3, 3, HistoryVariant::MeanAbsolute).unwrap();
        assert_eq!(s.get(0, 1), 1.0);
        assert!(common_history_similarity(&ds, "target", 3, 2, HistoryVariant::MeanAbsolute).is_err());
    }

    #[test]
    fn sparsify_rules() {
        let v = DMatrix::from_row_slice(3, 3, &[0.0, 0.9, 0.5, 0.9, 0.0, 0.4, 0.5, 0.4, 0.0]);
        let s = SimilarityMatrix::new(v, SimilarityKind::Given, None).unwrap();
        let top1 = sparsify(&s, SparsifyRule::TopK(1)).unwrap();
        let edges: Vec<(usize, usize)> = top1.edges().iter().map(|e| (e.0, e.1)).collect();
        assert_eq!(edges, vec![(0, 1), (0, 2)]);
        assert_eq!(sparsify(&s, SparsifyRule::Threshold(0.0)).unwrap(), s);
        assert!(sparsify(&s, SparsifyRule::Threshold(0.95)).unwrap().edges().is_empty());
        assert!(sparsify(&s, SparsifyRule::TopK(0)).is_err());
    }

    #[test]
    fn attribute_histograms_are_normalized() {
        let ds = history_dataset(&[&[0.1, 0.2, 0.9, 0.3], &[0.5, 0.5, 0.6, 0.7]]);
        let h = histograms_from_attribute(&ds, "target", 0..4, 4).unwrap();
        for row in &h {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        js_divergence_similarity(&h).unwrap();
    }

    fn simplex(raw: Vec<f64>) -> Vec<f64> {
        let t: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / t).collect()
    }

    proptest! {
        #[test]
        fn jsd_symmetric_and_bounded(a in proptest::collection::vec(0.0f64..1.0, 5), b in proptest::collection::vec(0.0f64..1.0, 5)) {
            prop_assume!(a.iter().sum::<f64>() > 1e-3 && b.iter().sum::<f64>() > 1e-3);
            let (p, q) = (simplex(a), simplex(b));
            let d1 = js_divergence(&p, &q);
            let d2 = js_divergence(&q, &p);
            prop_assert!((d1 - d2).abs() < 1e-15);
            prop_assert!(d1 >= -1e-15 && d1 <= std::f64::consts::LN_2 + 1e-12);
        }

        #[test]
        fn history_translation_invariant(vals in proptest::collection::vec(-5.0f64..5.0, 16), shift in -10.0f64..10.0) {
            let grid = DMatrix::from_column_slice(4, 4, &vals);
            let mk = |g: DMatrix<f64>| TemporalGraphDataset::from_dense(
                (0..4).map(|i| i.to_string()).collect(), vec![0, 1, 2, 3], g, vec![]).unwrap();
            let a = common_history_similarity(&mk(grid.clone()), "target", 3, 3, HistoryVariant::MeanAbsolute).unwrap();
            let b = common_history_similarity(&mk(grid.add_scalar(shift)), "target", 3, 3, HistoryVariant::MeanAbsolute).unwrap();
            for (x, y) in a.values().iter().zip(b.values().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert_eq!(a.get(i, j), a.get(j, i));
                    if i != j {
                        prop_assert!(a.get(i, j) > 0.0 && a.get(i, j) <= 1.0);
                    }
                }
            }
        }
    }
}
