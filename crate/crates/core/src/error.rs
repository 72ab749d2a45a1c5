use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("light index {index} out of range for a stage of {n} lights")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("triangulation failed: {0}")]
    Triangulation(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("no shadow edge crossing in row {0}")]
    NoCrossing(usize),
    #[error("{count} shadow edge crossings in row {row}")]
    AmbiguousCrossing { row: usize, count: usize },
    #[error("rank-deficient light matrix: {0}")]
    RankDeficient(String),
    #[error("renderer failed at env pixel ({x}, {y}): {message}")]
    Renderer { x: usize, y: usize, message: String },
    #[error("malformed file {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            message: message.into(),
        }
    }
}
