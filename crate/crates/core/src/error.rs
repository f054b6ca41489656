use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why an ellipse fit was rejected.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("ellipse fit needs at least 6 points, got {0}")]
    TooFewPoints(usize),
    #[error("points are collinear or coincident")]
    Degenerate,
    #[error("no eigenvector satisfies the ellipse constraint")]
    NoEllipse,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("ellipse fit failed: {0}")]
    Fit(#[from] FitError),

    #[error("both rasters are empty, IoU is undefined")]
    EmptyUnion,

    #[error("label image kind mismatch: {0}")]
    LabelKind(String),

    #[error("no clusters present in the instance image")]
    NoClusters,

    #[error("probability distribution at pixel {pixel} sums to {sum}")]
    NotNormalized { pixel: usize, sum: f64 },

    #[error("optimizer diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("unknown head side on ellipse {0}")]
    UnknownHeadSide(usize),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for failures of the numerical kind (fits, divergence).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Fit(_) | Error::Divergence { .. } | Error::EmptyUnion)
    }

    /// True for failures caused by input files or data content.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Json { .. }
                | Error::Image { .. }
                | Error::Dataset(_)
                | Error::Generation(_)
                | Error::ShapeMismatch { .. }
                | Error::LabelKind(_)
        )
    }

    /// Process exit code for the command-line tool: 1 for invalid parameters,
    /// 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) => 1,
            e if e.is_numerical() => 3,
            _ => 2,
        }
    }
}
