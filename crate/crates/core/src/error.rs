use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("duplicate rows for (timestep {timestep}, node {node}) at lines {first_line} and {second_line}")]
    DuplicateRow {
        timestep: i64,
        node: String,
        first_line: usize,
        second_line: usize,
    },

    #[error("non-numeric value {value:?} in column {column} at line {line}")]
    NonNumeric {
        line: usize,
        column: String,
        value: String,
    },

    #[error("constant series for node {0}: cannot rescale")]
    ConstantSeries(String),

    #[error("insufficient samples: need {needed}, have {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("ill-conditioned normal equations (condition estimate {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("factorization failed (minimum pivot {min_pivot:e})")]
    Factorization { min_pivot: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown node {0}")]
    UnknownNode(String),

    #[error("degenerate similarity: all similarity values are equal")]
    DegenerateSimilarity,

    #[error("missing {0} channel on snapshot")]
    MissingChannel(&'static str),

    #[error("unstable configuration: spectral radius {0} >= 1")]
    Unstable(f64),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
