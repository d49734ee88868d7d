use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("element {element} has non-positive signed area {area:e}")]
    DegenerateElement { element: usize, area: f64 },

    #[error("mesh is not conforming: side ({0}, {1}) is shared by more than two elements")]
    NonConforming(usize, usize),

    #[error("boundary side ({0}, {1}) has no label")]
    UnlabeledBoundary(usize, usize),

    #[error("labeled side ({0}, {1}) is not on the boundary")]
    SpuriousBoundaryLabel(usize, usize),

    #[error("mesh format error at line {line}: {message}")]
    MeshFormat { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("functions live on different meshes or spaces")]
    SpaceMismatch,

    #[error("singular local moment system on element {0}")]
    SingularMoments(usize),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("dual variable is infeasible: {0}")]
    Infeasible(String),

    #[error("data are incompatible with the constraints: {0}")]
    IncompatibleData(String),

    #[error("local Newton solve did not converge for |z| = {0:e}")]
    NewtonFailure(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
