use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ZslError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("bad magic: expected \"ZSLM\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported ZSLM version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: header claims {expected} values, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("dimension overflow: {rows}x{cols}")]
    DimensionOverflow { rows: u64, cols: u64 },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("split overlap: class {0} is both seen and unseen")]
    SplitOverlap(usize),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("empty class {0}: no examples")]
    EmptyClass(usize),

    #[error("zero-norm vector ({0})")]
    ZeroNorm(String),

    #[error("degenerate neighborhood for prototype {0}")]
    DegenerateNeighborhood(usize),

    #[error(
        "singular Sylvester system: eigenvalue {left} of L and {right} of -R coincide within {tol:e}"
    )]
    SingularSylvester { left: String, right: String, tol: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl ZslError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ZslError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in the numerics rather than inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            ZslError::SingularSylvester { .. } | ZslError::Numerical(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, ZslError::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, ZslError>;
