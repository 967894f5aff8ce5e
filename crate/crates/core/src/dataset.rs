//! Evolving-graph datasets: ingestion, target scaling and lag features.
//!
//! A dataset is a dense `T x N` grid of node targets plus named per-node
//! attributes, with a mask marking which `(timestep, node)` cells were
//! actually observed. Unobserved cells hold `NaN`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Column mapping for long-format ingestion.
#[derive(Debug, Clone)]
pub struct IngestSchema {
    pub timestep: String,
    pub node_id: String,
    pub target: String,
    /// Attribute columns to keep. `None` keeps every remaining column.
    pub attributes: Option<Vec<String>>,
    pub delimiter: u8,
}

impl Default for IngestSchema {
    fn default() -> Self {
        Self {
            timestep: "timestep".into(),
            node_id: "node_id".into(),
            target: "target".into(),
            attributes: None,
            delimiter: b',',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGraphDataset {
    node_ids: Vec<String>,
    timesteps: Vec<i64>,
    /// rows = timesteps, columns = nodes
    targets: DMatrix<f64>,
    attribute_names: Vec<String>,
    attributes: Vec<DMatrix<f64>>,
    mask: DMatrix<bool>,
}

impl TemporalGraphDataset {
    /// Build a fully observed dataset from a `T x N` target grid.
    pub fn from_dense(
        node_ids: Vec<String>,
        timesteps: Vec<i64>,
        targets: DMatrix<f64>,
        attributes: Vec<(String, DMatrix<f64>)>,
    ) -> Result<Self> {
        let (t, n) = targets.shape();
        if node_ids.len() != n || timesteps.len() != t {
            return Err(Error::InvalidInput(format!(
                "target grid is {t}x{n} but got {} timesteps and {} nodes",
                timesteps.len(),
                node_ids.len()
            )));
        }
        if timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("timesteps must be strictly increasing".into()));
        }
        let mut attribute_names = Vec::new();
        let mut attribute_values = Vec::new();
        for (name, values) in attributes {
            if values.shape() != (t, n) {
                return Err(Error::InvalidInput(format!("attribute {name} has wrong shape")));
            }
            attribute_names.push(name);
            attribute_values.push(values);
        }
        let mask = targets.map(|v| v.is_finite());
        Ok(Self {
            node_ids,
            timesteps,
            targets,
            attribute_names,
            attributes: attribute_values,
            mask,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_timesteps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn timesteps(&self) -> &[i64] {
        &self.timesteps
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_observed(&self, t: usize, node: usize) -> bool {
        self.mask[(t, node)]
    }

    pub fn fully_observed(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    /// Attribute grid by name. The pseudo-attribute `target` resolves to the
    /// target grid itself.
    pub fn attribute(&self, name: &str) -> Result<&DMatrix<f64>> {
        if let Some(pos) = self.attribute_names.iter().position(|a| a == name) {
            return Ok(&self.attributes[pos]);
        }
        if name == "target" {
            return Ok(&self.targets);
        }
        Err(Error::InvalidInput(format!("unknown attribute {name}")))
    }

    pub fn node_index(&self, node: &str) -> Result<usize> {
        self.node_ids
            .iter()
            .position(|n| n == node)
            .ok_or_else(|| Error::UnknownNode(node.to_string()))
    }

    /// Target series of one node, in timestep order.
    pub fn series(&self, node: usize) -> Vec<f64> {
        self.targets.column(node).iter().copied().collect()
    }

    pub(crate) fn with_targets(&self, targets: DMatrix<f64>) -> Self {
        Self {
            targets,
            ..self.clone()
        }
    }

    /// Read a long-format delimited file.
    pub fn ingest_path(path: impl AsRef<Path>, schema: &IngestSchema) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::ingest(file, schema)
    }

    /// Parse long-format rows `(timestep, node_id, target, attributes...)`.
    ///
    /// Nodes are ordered by first appearance and timesteps ascending. Cells
    /// with no row are left unobserved.
    pub fn ingest<R: Read>(source: R, schema: &IngestSchema) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(schema.delimiter)
            .trim(csv::Trim::All)
            .from_reader(source);
        let headers = reader
            .headers()
            .map_err(|e| Error::Parse(e.to_string()))?
            .clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse(format!("missing column {name}")))
        };
        let t_col = col(&schema.timestep)?;
        let n_col = col(&schema.node_id)?;
        let y_col = col(&schema.target)?;
        let attr_cols: Vec<(String, usize)> = match &schema.attributes {
            Some(names) => names
                .iter()
                .map(|a| col(a).map(|c| (a.clone(), c)))
                .collect::<Result<_>>()?,
            None => headers
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != t_col && *i != n_col && *i != y_col)
                .map(|(i, h)| (h.to_string(), i))
                .collect(),
        };

        struct Row {
            t: i64,
            node: usize,
            y: f64,
            attrs: Vec<f64>,
        }
        let mut node_ids: Vec<String> = Vec::new();
        let mut node_pos: HashMap<String, usize> = HashMap::new();
        let mut seen: HashMap<(i64, usize), usize> = HashMap::new();
        let mut rows = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            // header is line 1
            let line = idx + 2;
            let record = record.map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
            let field = |c: usize| record.get(c).unwrap_or("");
            let t: i64 = field(t_col).parse().map_err(|_| Error::NonNumeric {
                line,
                column: schema.timestep.clone(),
                value: field(t_col).to_string(),
            })?;
            let parse_real = |c: usize, name: &str| -> Result<f64> {
                let raw = field(c);
                match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(Error::NonNumeric {
                        line,
                        column: name.to_string(),
                        value: raw.to_string(),
                    }),
                }
            };
            let y = parse_real(y_col, &schema.target)?;
            let attrs = attr_cols
                .iter()
                .map(|(name, c)| parse_real(*c, name))
                .collect::<Result<Vec<_>>>()?;
            let name = field(n_col).to_string();
            let node = *node_pos.entry(name.clone()).or_insert_with(|| {
                node_ids.push(name.clone());
                node_ids.len() - 1
            });
            if let Some(first) = seen.insert((t, node), line) {
                return Err(Error::DuplicateRow {
                    timestep: t,
                    node: name,
                    first_line: first,
                    second_line: line,
                });
            }
            rows.push(Row { t, node, y, attrs });
        }
        if rows.is_empty() {
            return Err(Error::InvalidInput("no data rows".into()));
        }

        let mut timesteps: Vec<i64> = rows.iter().map(|r| r.t).collect();
        timesteps.sort_unstable();
        timesteps.dedup();
        let t_index: HashMap<i64, usize> =
            timesteps.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let (nt, nn) = (timesteps.len(), node_ids.len());
        let mut targets = DMatrix::from_element(nt, nn, f64::NAN);
        let mut attributes = vec![DMatrix::from_element(nt, nn, f64::NAN); attr_cols.len()];
        let mut mask = DMatrix::from_element(nt, nn, false);
        for row in rows {
            let ti = t_index[&row.t];
            targets[(ti, row.node)] = row.y;
            mask[(ti, row.node)] = true;
            for (a, v) in row.attrs.into_iter().enumerate() {
                attributes[a][(ti, row.node)] = v;
            }
        }
        Ok(Self {
            node_ids,
            timesteps,
            targets,
            attribute_names: attr_cols.into_iter().map(|(n, _)| n).collect(),
            attributes,
            mask,
        })
    }

    /// Write the long format read by [`ingest`](Self::ingest). Only observed
    /// cells are written; values use shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(sink);
        let mut header = vec!["timestep".to_string(), "node_id".into(), "target".into()];
        header.extend(self.attribute_names.iter().cloned());
        writer
            .write_record(&header)
            .map_err(|e| Error::Parse(e.to_string()))?;
        for (ti, t) in self.timesteps.iter().enumerate() {
            for (ni, node) in self.node_ids.iter().enumerate() {
                if !self.mask[(ti, ni)] {
                    continue;
                }
                let mut rec = vec![t.to_string(), node.clone(), self.targets[(ti, ni)].to_string()];
                rec.extend(self.attributes.iter().map(|a| a[(ti, ni)].to_string()));
                writer
                    .write_record(&rec)
                    .map_err(|e| Error::Parse(e.to_string()))?;
            }
        }
        writer.flush().map_err(|e| Error::io("csv sink", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleMode {
    Global,
    PerNode,
}

/// Min-max rescaling of targets to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetScaler {
    mode: ScaleMode,
    /// One entry in global mode, one per node otherwise.
    min: Vec<f64>,
    max: Vec<f64>,
}

impl TargetScaler {
    /// Fit on the observed targets of timestep rows `rows`.
    pub fn fit(
        dataset: &TemporalGraphDataset,
        mode: ScaleMode,
        rows: std::ops::Range<usize>,
    ) -> Result<Self> {
        let observed = |node: usize| {
            rows.clone()
                .filter(move |&t| dataset.mask[(t, node)])
                .map(move |t| dataset.targets[(t, node)])
        };
        let bounds = |vals: &mut dyn Iterator<Item = f64>| {
            vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            })
        };
        match mode {
            ScaleMode::Global => {
                let mut all = (0..dataset.n_nodes()).flat_map(observed);
                let (lo, hi) = bounds(&mut all);
                if !(hi > lo) {
                    return Err(Error::ConstantSeries("<all nodes>".into()));
                }
                Ok(Self {
                    mode,
                    min: vec![lo],
                    max: vec![hi],
                })
            }
            ScaleMode::PerNode => {
                let mut min = Vec::with_capacity(dataset.n_nodes());
                let mut max = Vec::with_capacity(dataset.n_nodes());
                for node in 0..dataset.n_nodes() {
                    let (lo, hi) = bounds(&mut observed(node));
                    if !(hi > lo) {
                        return Err(Error::ConstantSeries(dataset.node_ids[node].clone()));
                    }
                    min.push(lo);
                    max.push(hi);
                }
                Ok(Self { mode, min, max })
            }
        }
    }

    pub fn mode(&self) -> ScaleMode {
        self.mode
    }

    fn bounds(&self, node: usize) -> (f64, f64) {
        match self.mode {
            ScaleMode::Global => (self.min[0], self.max[0]),
            ScaleMode::PerNode => (self.min[node], self.max[node]),
        }
    }

    pub fn scale_value(&self, node: usize, y: f64) -> f64 {
        let (lo, hi) = self.bounds(node);
        (y - lo) / (hi - lo)
    }

    pub fn inverse_value(&self, node: usize, z: f64) -> f64 {
        let (lo, hi) = self.bounds(node);
        z * (hi - lo) + lo
    }

    /// Multiplier mapping scaled variances back to the original units.
    pub fn variance_factor(&self, node: usize) -> f64 {
        let (lo, hi) = self.bounds(node);
        (hi - lo) * (hi - lo)
    }

    pub fn transform(&self, dataset: &TemporalGraphDataset) -> TemporalGraphDataset {
        let mut targets = dataset.targets.clone();
        let rows = dataset.n_timesteps();
        for (i, v) in targets.iter_mut().enumerate() {
            let (t, n) = (i % rows, i / rows);
            if dataset.mask[(t, n)] {
                *v = self.scale_value(n, *v);
            }
        }
        dataset.with_targets(targets)
    }

    pub fn inverse_transform(&self, dataset: &TemporalGraphDataset) -> TemporalGraphDataset {
        let mut targets = dataset.targets.clone();
        let rows = dataset.n_timesteps();
        for (i, v) in targets.iter_mut().enumerate() {
            let (t, n) = (i % rows, i / rows);
            if dataset.mask[(t, n)] {
                *v = self.inverse_value(n, *v);
            }
        }
        dataset.with_targets(targets)
    }
}

/// Rescale all observed targets to `[0, 1]`, fitting on the whole dataset.
pub fn normalize_targets(
    dataset: &TemporalGraphDataset,
    mode: ScaleMode,
) -> Result<(TemporalGraphDataset, TargetScaler)> {
    let scaler = TargetScaler::fit(dataset, mode, 0..dataset.n_timesteps())?;
    Ok((scaler.transform(dataset), scaler))
}

/// Autoregressive design for one node: column 0 is lag 1 (`t-1`), column
/// `L-1` is lag `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LagFeatureMatrix {
    pub lag: usize,
    /// Timestep index (row of the dataset grid) of each label.
    pub rows: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl LagFeatureMatrix {
    /// Rows for every target index in `targets` whose label and `lag`
    /// predecessors are all finite.
    pub fn from_series(
        series: &[f64],
        lag: usize,
        targets: std::ops::Range<usize>,
    ) -> Result<Self> {
        if lag == 0 {
            return Err(Error::InvalidInput("lag must be at least 1".into()));
        }
        let mut out = Self {
            lag,
            rows: Vec::new(),
            features: Vec::new(),
            labels: Vec::new(),
        };
        for t in targets.start.max(lag)..targets.end.min(series.len()) {
            let window = &series[t - lag..=t];
            if window.iter().any(|v| !v.is_finite()) {
                continue;
            }
            out.rows.push(t);
            out.features.push(lag_vector(series, t, lag));
            out.labels.push(series[t]);
        }
        if out.rows.is_empty() {
            return Err(Error::InsufficientSamples {
                needed: lag + 1,
                available: targets.len().min(series.len()),
            });
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// `[y[t-1], y[t-2], ..., y[t-lag]]`
pub fn lag_vector(series: &[f64], t: usize, lag: usize) -> Vec<f64> {
    (1..=lag).map(|s| series[t - s]).collect()
}

pub fn build_lag_features(
    dataset: &TemporalGraphDataset,
    node: &str,
    lag: usize,
) -> Result<LagFeatureMatrix> {
    let idx = dataset.node_index(node)?;
    let series = dataset.series(idx);
    if series.len() < lag + 1 {
        return Err(Error::InsufficientSamples {
            needed: lag + 1,
            available: series.len(),
        });
    }
    LagFeatureMatrix::from_series(&series, lag, 0..series.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_csv() -> &'static str {
        "timestep,node_id,target,whites\n1,A,10,3\n1,B,20,4\n2,A,11,3\n2,B,21,5\n3,A,12,2\n3,B,22,6\n"
    }

    #[test]
    fn full_grid_ingest() {
        let ds = TemporalGraphDataset::ingest(small_csv().as_bytes(), &IngestSchema::default())
            .unwrap();
        assert_eq!(ds.n_timesteps(), 3);
        assert_eq!(ds.n_nodes(), 2);
        assert!(ds.fully_observed());
        assert_eq!(ds.attribute("whites").unwrap()[(2, 1)], 6.0);
        assert_eq!(ds.node_ids(), &["A".to_string(), "B".to_string()]);
    }

    #[test]
    fn missing_cell_is_masked() {
        let csv = "timestep,node_id,target\n1,A,1\n1,B,2\n2,A,3\n3,A,5\n3,B,6\n";
        let ds = TemporalGraphDataset::ingest(csv.as_bytes(), &IngestSchema::default()).unwrap();
        assert!(!ds.is_observed(1, 1));
        assert!(ds.targets()[(1, 1)].is_nan());
        assert!(ds.is_observed(2, 1));
    }

    #[test]
    fn duplicate_row_rejected_with_lines() {
        let csv = "timestep,node_id,target\n1,A,1\n1,B,2\n1,A,3\n";
        let err = TemporalGraphDataset::ingest(csv.as_bytes(), &IngestSchema::default())
            .unwrap_err();
        match err {
            Error::DuplicateRow {
                first_line,
                second_line,
                ..
            } => assert_eq!((first_line, second_line), (2, 4)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_numeric_target_rejected() {
        let csv = "timestep,node_id,target\n1,A,abc\n";
        let err = TemporalGraphDataset::ingest(csv.as_bytes(), &IngestSchema::default())
            .unwrap_err();
        assert!(matches!(err, Error::NonNumeric { line: 2, .. }));
    }

    #[test]
    fn custom_delimiter_and_columns() {
        let csv = "month;disease;rate\n1;x;0.5\n2;x;0.7\n";
        let schema = IngestSchema {
            timestep: "month".into(),
            node_id: "disease".into(),
            target: "rate".into(),
            attributes: None,
            delimiter: b';',
        };
        let ds = TemporalGraphDataset::ingest(csv.as_bytes(), &schema).unwrap();
        assert_eq!(ds.series(0), vec![0.5, 0.7]);
    }

    #[test]
    fn global_rescale() {
        let ds = TemporalGraphDataset::from_dense(
            vec!["a".into()],
            vec![0, 1, 2],
            DMatrix::from_column_slice(3, 1, &[0.0, 50.0, 100.0]),
            vec![],
        )
        .unwrap();
        let (scaled, _) = normalize_targets(&ds, ScaleMode::Global).unwrap();
        assert_eq!(scaled.series(0), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_series_names_node() {
        let ds = TemporalGraphDataset::from_dense(
            vec!["flat".into(), "ok".into()],
            vec![0, 1, 2],
            DMatrix::from_column_slice(3, 2, &[10.0, 10.0, 10.0, 1.0, 2.0, 3.0]),
            vec![],
        )
        .unwrap();
        let err = normalize_targets(&ds, ScaleMode::PerNode).unwrap_err();
        assert!(matches!(err, Error::ConstantSeries(ref n) if n == "flat"));
        assert!(err.to_string().contains("constant series"));
    }

    fn one_node(series: &[f64]) -> TemporalGraphDataset {
        TemporalGraphDataset::from_dense(
            vec!["n".into()],
            (0..series.len() as i64).collect(),
            DMatrix::from_column_slice(series.len(), 1, series),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn lag_one_rows() {
        let m = build_lag_features(&one_node(&[1.0, 2.0, 3.0, 4.0]), "n", 1).unwrap();
        assert_eq!(m.features, vec![vec![1.0], vec![2.0], vec![3.0]]);
        assert_eq!(m.labels, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn lag_two_most_recent_first() {
        let m = build_lag_features(&one_node(&[1.0, 2.0, 3.0, 4.0]), "n", 2).unwrap();
        assert_eq!(m.features, vec![vec![2.0, 1.0], vec![3.0, 2.0]]);
        assert_eq!(m.labels, vec![3.0, 4.0]);
    }

    #[test]
    fn short_series_rejected() {
        assert!(build_lag_features(&one_node(&[1.0, 2.0]), "n", 3).is_err());
    }

    proptest! {
        #[test]
        fn scale_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 6..40), per_node in any::<bool>()) {
            let n = 2;
            let t = vals.len() / n;
            prop_assume!(t >= 2);
            let grid = DMatrix::from_column_slice(t, n, &vals[..t * n]);
            let ds = TemporalGraphDataset::from_dense(
                vec!["a".into(), "b".into()], (0..t as i64).collect(), grid, vec![]).unwrap();
            let mode = if per_node { ScaleMode::PerNode } else { ScaleMode::Global };
            if let Ok((scaled, scaler)) = normalize_targets(&ds, mode) {
                for v in scaled.targets().iter() {
                    prop_assert!((-1e-12..=1.0 + 1e-12).contains(v));
                }
                let back = scaler.inverse_transform(&scaled);
                for (a, b) in back.targets().iter().zip(ds.targets().iter()) {
                    prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                }
            }
        }

        #[test]
        fn lag_rows_never_leak(series in proptest::collection::vec(0.0f64..1.0, 5..30), lag in 1usize..4) {
            let m = LagFeatureMatrix::from_series(&series, lag, 0..series.len()).unwrap();
            for (row, feats) in m.rows.iter().zip(&m.features) {
                prop_assert!(*row >= lag);
                for (s, v) in feats.iter().enumerate() {
                    prop_assert_eq!(*v, series[row - 1 - s]);
                }
            }
        }

        #[test]
        fn affine_scaling_preserves_extreme_nodes(vals in proptest::collection::vec(0.0f64..100.0, 12), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let grid = DMatrix::from_row_slice(3, 4, &vals);
            let ds = TemporalGraphDataset::from_dense(
                (0..4).map(|i| i.to_string()).collect(), vec![0, 1, 2], grid.map(|v| a * v + b), vec![]).unwrap();
            if let Ok((scaled, _)) = normalize_targets(&ds, ScaleMode::Global) {
                for t in 0..3 {
                    prop_assert_eq!(grid.row(t).transpose().argmax().0, scaled.targets().row(t).transpose().argmax().0);
                    prop_assert_eq!(grid.row(t).transpose().argmin().0, scaled.targets().row(t).transpose().argmin().0);
                }
            }
        }
    }
}
