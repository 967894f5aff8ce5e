use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dataset::ScaleMode;
use crate::error::{Error, Result};
use crate::ext::{StructuredKind, UfgcrfOptimizer, UfgcrfTrainConfig};
use crate::gcrf::AlphaMode;
use crate::kvfile::{KvFile, KvWriter};
use crate::predictors::Family;
use crate::similarity::{HistoryVariant, SparsifyRule};
use crate::synth::SynthConfig;

pub const EXPERIMENT_FORMAT: &str = "tgcrf-experiment 1";

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synth(SynthConfig),
}

/// Similarity graph used for every snapshot.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphSpec {
    CommonHistory {
        attribute: String,
        h: usize,
        variant: HistoryVariant,
    },
    /// Histograms of the attribute over the training window.
    JsDivergence { attribute: String, bins: usize },
    /// Static triplet file.
    File(PathBuf),
    /// The generator's coupling graph; synthetic sources only.
    Truth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefitPolicy {
    /// Refit base predictors and structured parameters before every test month.
    Monthly,
    /// Fit everything once on data up to the end of the training period.
    Once,
}

/// ufGCRF node features, standardized on the training snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct UfFeatures {
    /// Most recent target values (scaled).
    pub target_lags: usize,
    /// `ln sigma^2` of every base predictor.
    pub log_variance: bool,
    /// Attributes read at the previous timestep.
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UfSettings {
    pub hidden: usize,
    pub skip: bool,
    /// Start from the fitted uGCRF weights (needs `log_variance` and a
    /// direct input-output path).
    pub warm_start: bool,
    pub features: UfFeatures,
    pub train: UfgcrfTrainConfig,
}

impl Default for UfSettings {
    fn default() -> Self {
        Self {
            hidden: 4,
            skip: true,
            warm_start: true,
            features: UfFeatures {
                target_lags: 1,
                log_variance: true,
                attributes: Vec::new(),
            },
            train: UfgcrfTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub graph: GraphSpec,
    pub sparsify: Option<SparsifyRule>,
    pub families: Vec<Family>,
    pub lags: Vec<usize>,
    pub models: Vec<StructuredKind>,
    /// Training window length in timesteps.
    pub window: usize,
    pub test_months: usize,
    /// Snapshots the structured models are trained on.
    pub train_snapshots: usize,
    /// First test timestep; defaults to the last `test_months` timesteps.
    pub test_start: Option<i64>,
    /// Last timestep of the training period; defaults to just before
    /// `test_start`.
    pub train_end: Option<i64>,
    pub scale: Option<ScaleMode>,
    pub refit: RefitPolicy,
    pub alpha_mode: AlphaMode,
    /// Grid points per GP hyperparameter.
    pub gp_grid: usize,
    pub seed: u64,
    pub uf: UfSettings,
}

impl ExperimentConfig {
    pub fn new(source: DataSource) -> Self {
        Self {
            source,
            graph: GraphSpec::CommonHistory {
                attribute: "target".into(),
                h: 3,
                variant: HistoryVariant::MeanAbsolute,
            },
            sparsify: None,
            families: vec![Family::Linear, Family::Gp],
            lags: vec![1, 2, 3],
            models: vec![StructuredKind::Gcrf, StructuredKind::Ugcrf, StructuredKind::Ufgcrf],
            window: 12,
            test_months: 12,
            train_snapshots: 12,
            test_start: None,
            train_end: None,
            scale: Some(ScaleMode::Global),
            refit: RefitPolicy::Monthly,
            alpha_mode: AlphaMode::Shared,
            gp_grid: 8,
            seed: 0,
            uf: UfSettings::default(),
        }
    }

    /// Checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.families.is_empty() || self.lags.is_empty() {
            return bad("need at least one predictor family and lag".into());
        }
        if self.lags.contains(&0) {
            return bad("lags must be at least 1".into());
        }
        let max_lag = *self.lags.iter().max().unwrap();
        if self.window < max_lag + 1 {
            return bad(format!("window {} is shorter than max lag + 1 = {}", self.window, max_lag + 1));
        }
        if self.test_months == 0 || self.train_snapshots == 0 {
            return bad("test_months and train_snapshots must be positive".into());
        }
        if let (Some(end), Some(start)) = (self.train_end, self.test_start) {
            if end >= start {
                return bad(format!("test window starting at {start} overlaps training window ending at {end}"));
            }
        }
        if let GraphSpec::CommonHistory { h, .. } = self.graph {
            if h == 0 {
                return bad("history must be at least 1".into());
            }
        }
        if matches!(self.graph, GraphSpec::Truth) && !matches!(self.source, DataSource::Synth(_)) {
            return bad("graph = truth needs a synthetic source".into());
        }
        if self.gp_grid == 0 {
            return bad("gp_grid must be positive".into());
        }
        if let DataSource::Synth(s) = &self.source {
            s.validate()?;
        }
        Ok(())
    }

    /// Parse a config file's text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        if let Some(f) = kv.take("format") {
            if f != EXPERIMENT_FORMAT {
                return Err(Error::Parse(format!("unsupported format {f}")));
            }
        }
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let synth_inline: Vec<String> = kv.take_prefixed("synth.");
        let source = match (kv.take("dataset"), kv.take("synth")) {
            (Some(_), Some(_)) => return Err(Error::Parse("give either dataset or synth, not both".into())),
            (Some(p), None) if synth_inline.is_empty() => DataSource::Csv(resolve(p)),
            (None, Some(p)) if synth_inline.is_empty() => DataSource::Synth(SynthConfig::read_path(resolve(p))?),
            (None, None) if !synth_inline.is_empty() => DataSource::Synth(SynthConfig::parse(&synth_inline.join("\n"))?),
            (None, None) => return Err(Error::Parse("config needs dataset, synth or synth.* keys".into())),
            _ => return Err(Error::Parse("synth.* keys cannot be combined with a dataset or synth file".into())),
        };
        let mut cfg = Self::new(source);
        let attribute = kv.take("similarity_attribute").unwrap_or_else(|| "target".into());
        cfg.graph = match kv.take("similarity").as_deref().unwrap_or("common-history") {
            "common-history" => GraphSpec::CommonHistory {
                attribute,
                h: kv.take_or("history", 3)?,
                variant: kv.take_or("history_variant", HistoryVariant::MeanAbsolute)?,
            },
            "js-divergence" => GraphSpec::JsDivergence {
                attribute,
                bins: kv.take_or("jsd_bins", 10)?,
            },
            "file" => GraphSpec::File(resolve(
                kv.take("similarity_file")
                    .ok_or_else(|| Error::Parse("similarity = file needs similarity_file".into()))?,
            )),
            "truth" => GraphSpec::Truth,
            other => return Err(Error::Parse(format!("unknown similarity {other}"))),
        };
        cfg.sparsify = match kv.take("sparsify") {
            None => None,
            Some(s) if s == "none" => None,
            Some(s) => Some(s.parse()?),
        };
        if let Some(f) = kv.take_list("families")? {
            cfg.families = f;
        }
        if let Some(l) = kv.take_list("lags")? {
            cfg.lags = l;
        }
        if let Some(m) = kv.take_list("models")? {
            cfg.models = m;
        }
        cfg.window = kv.take_or("window", cfg.window)?;
        cfg.test_months = kv.take_or("test_months", cfg.test_months)?;
        cfg.train_snapshots = kv.take_or("train_snapshots", cfg.train_snapshots)?;
        cfg.test_start = kv.take_parse("test_start")?;
        cfg.train_end = kv.take_parse("train_end")?;
        cfg.scale = match kv.take("scale").as_deref() {
            None | Some("global") => Some(ScaleMode::Global),
            Some("per-node") => Some(ScaleMode::PerNode),
            Some("none") => None,
            Some(other) => return Err(Error::Parse(format!("unknown scale {other}"))),
        };
        cfg.refit = match kv.take("refit").as_deref() {
            None | Some("monthly") => RefitPolicy::Monthly,
            Some("once") => RefitPolicy::Once,
            Some(other) => return Err(Error::Parse(format!("unknown refit policy {other}"))),
        };
        cfg.alpha_mode = kv.take_or("alpha_mode", cfg.alpha_mode)?;
        cfg.gp_grid = kv.take_or("gp_grid", cfg.gp_grid)?;
        cfg.seed = kv.take_or("seed", cfg.seed)?;
        let uf = &mut cfg.uf;
        uf.hidden = kv.take_or("uf_hidden", uf.hidden)?;
        uf.skip = kv.take_or("uf_skip", uf.skip)?;
        uf.warm_start = kv.take_or("uf_warm_start", uf.warm_start)?;
        uf.features.target_lags = kv.take_or("uf_target_lags", uf.features.target_lags)?;
        uf.features.log_variance = kv.take_or("uf_log_variance", uf.features.log_variance)?;
        if let Some(a) = kv.take_list("uf_attributes")? {
            uf.features.attributes = a;
        }
        uf.train.optimizer = match kv.take("uf_optimizer").as_deref() {
            None | Some("gradient") => UfgcrfOptimizer::GradientAscent,
            Some("lbfgs") => UfgcrfOptimizer::Lbfgs,
            Some(other) => return Err(Error::Parse(format!("unknown uf_optimizer {other}"))),
        };
        uf.train.step = kv.take_or("uf_step", uf.train.step)?;
        uf.train.max_epochs = kv.take_or("uf_epochs", uf.train.max_epochs)?;
        uf.train.batch_size = kv.take_parse("uf_batch")?;
        kv.finish()?;
        cfg.uf.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Canonical text; `parse` reads it back to an equal config.
    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::default();
        w.put("format", EXPERIMENT_FORMAT);
        match &self.source {
            DataSource::Csv(p) => {
                w.put("dataset", p.display());
            }
            DataSource::Synth(s) => {
                for line in s.to_kv().lines().filter(|l| !l.starts_with("format")) {
                    w.put_raw(&format!("synth.{line}"));
                }
            }
        }
        match &self.graph {
            GraphSpec::CommonHistory { attribute, h, variant } => {
                w.put("similarity", "common-history")
                    .put("similarity_attribute", attribute)
                    .put("history", h)
                    .put("history_variant", variant);
            }
            GraphSpec::JsDivergence { attribute, bins } => {
                w.put("similarity", "js-divergence")
                    .put("similarity_attribute", attribute)
                    .put("jsd_bins", bins);
            }
            GraphSpec::File(p) => {
                w.put("similarity", "file").put("similarity_file", p.display());
            }
            GraphSpec::Truth => {
                w.put("similarity", "truth");
            }
        }
        match self.sparsify {
            Some(r) => w.put("sparsify", r),
            None => w.put("sparsify", "none"),
        };
        let families: Vec<String> = self.families.iter().map(|f| f.label().to_ascii_lowercase()).collect();
        w.put_list("families", &families)
            .put_list("lags", &self.lags)
            .put_list("models", &self.models)
            .put("window", self.window)
            .put("test_months", self.test_months)
            .put("train_snapshots", self.train_snapshots);
        if let Some(t) = self.test_start {
            w.put("test_start", t);
        }
        if let Some(t) = self.train_end {
            w.put("train_end", t);
        }
        w.put(
            "scale",
            match self.scale {
                Some(ScaleMode::Global) => "global",
                Some(ScaleMode::PerNode) => "per-node",
                None => "none",
            },
        )
        .put(
            "refit",
            match self.refit {
                RefitPolicy::Monthly => "monthly",
                RefitPolicy::Once => "once",
            },
        )
        .put("alpha_mode", self.alpha_mode)
        .put("gp_grid", self.gp_grid)
        .put("seed", self.seed);
        let uf = &self.uf;
        w.put("uf_hidden", uf.hidden)
            .put("uf_skip", uf.skip)
            .put("uf_warm_start", uf.warm_start)
            .put("uf_target_lags", uf.features.target_lags)
            .put("uf_log_variance", uf.features.log_variance)
            .put_list("uf_attributes", &uf.features.attributes)
            .put(
                "uf_optimizer",
                match uf.train.optimizer {
                    UfgcrfOptimizer::GradientAscent => "gradient",
                    UfgcrfOptimizer::Lbfgs => "lbfgs",
                },
            )
            .put("uf_step", uf.train.step)
            .put("uf_epochs", uf.train.max_epochs);
        if let Some(b) = uf.train.batch_size {
            w.put("uf_batch", b);
        }
        w.finish()
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let text = "synth.n_nodes = 10\nsynth.seed = 4\nsimilarity = js-divergence\njsd_bins = 5\n\
                    sparsify = top-k:3\nfamilies = lr\nlags = 1,2\nmodels = gcrf,ufgcrf\nwindow = 24\n\
                    uf_attributes = regime\nuf_optimizer = lbfgs\nseed = 9\nrefit = once\n";
        let cfg = ExperimentConfig::parse(text, Path::new("/tmp")).unwrap();
        assert_eq!(cfg.families, vec![Family::Linear]);
        assert_eq!(cfg.sparsify, Some(SparsifyRule::TopK(3)));
        assert_eq!(cfg.uf.train.seed, 9);
        let back = ExperimentConfig::parse(&cfg.to_kv(), Path::new("/tmp")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = ExperimentConfig { seed: 10, ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = Path::new("/tmp");
        assert!(ExperimentConfig::parse("window = 12\n", base).is_err());
        assert!(ExperimentConfig::parse("dataset = a.csv\nsynth.seed = 1\n", base).is_err());
        assert!(ExperimentConfig::parse("dataset = a.csv\nlags = 1,5\nwindow = 5\n", base).is_err());
        assert!(ExperimentConfig::parse("dataset = a.csv\ntest_start = 10\ntrain_end = 10\n", base).is_err());
        assert!(ExperimentConfig::parse("dataset = a.csv\nsimilarity = truth\n", base).is_err());
        assert!(ExperimentConfig::parse("dataset = a.csv\nmystery = 1\n", base).is_err());
        let ok = ExperimentConfig::parse("dataset = a.csv\n", base).unwrap();
        assert_eq!(ok.source, DataSource::Csv(PathBuf::from("/tmp/a.csv")));
    }
}
