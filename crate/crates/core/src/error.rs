use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"OODS\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("truncated: {0}")]
    Truncated(String),

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("unsupported rank {0} (expected 2 or 3)")]
    UnsupportedRank(usize),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("dimension overflow: {0:?}")]
    DimensionOverflow(Vec<usize>),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("zero-count class {0} in training set")]
    ZeroCountClass(usize),

    #[error("no supervised pixels")]
    NoSupervisedPixels,

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("degenerate feature: zero-norm vector cannot be l2-normalized")]
    DegenerateFeature,

    #[error("non-finite feature value at sample {0}")]
    NonFinite(usize),

    #[error("invalid shift geometry: {0}")]
    InvalidGeometry(String),

    #[error("coverage violation: {0}")]
    Coverage(String),

    #[error("no admissible crop for class {class} after {attempts} attempts")]
    NoAdmissibleCrop { class: usize, attempts: usize },

    #[error("input is not on the probability simplex (sum {0})")]
    NotSimplex(f64),

    #[error("react clamp has not been calibrated")]
    UncalibratedClamp,

    #[error("class {0} is out of range")]
    ClassOutOfRange(usize),

    #[error("features must be l2-normalized for this score (stats were estimated without normalization)")]
    NotNormalized,

    #[error("empty score list")]
    EmptyScores,

    #[error("adaptive threshold: class {0} has no predicted calibration pixels")]
    UnpredictedClass(usize),

    #[error("unknown label value {0}")]
    UnknownLabel(i64),

    #[error("no anomaly pixels in ground truth")]
    NoAnomalyPixels,

    #[error("no healthy pixels in ground truth")]
    NoHealthyPixels,

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("insufficient heterogeneity: score IQR ratio {ratio:.3} is below {required}")]
    InsufficientHeterogeneity { ratio: f64, required: f64 },

    #[error("no input tiles in {0}")]
    NoInputTiles(PathBuf),

    #[error("missing calibration artifact: {0}")]
    MissingArtifact(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
