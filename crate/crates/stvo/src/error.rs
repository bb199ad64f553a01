use std::path::PathBuf;

/// Crate-wide error type. Variants map one-to-one onto the failure modes of
/// the individual subsystems; pipeline errors carry the frame/iteration they
/// occurred in.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rotation angle {0} is within 1e-6 of pi; log branch is ambiguous")]
    AngleNearPi(f64),
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tape already consumed by backward")]
    TapeConsumed,
    #[error("backward called on an inference-mode tape")]
    TapeNotRecording,
    #[error("unknown weight tensor '{0}'")]
    UnknownWeight(String),
    #[error("source frame {0} has an empty target set")]
    EmptyTargetSet(usize),
    #[error("invalid depth raster: {0}")]
    InvalidDepth(String),
    #[error("missing depth file: {0}")]
    MissingDepthFile(PathBuf),
    #[error("degenerate BA depth: {0}")]
    DegenerateBaDepth(String),
    #[error("attention matrix needs {required} bytes, budget is {budget}")]
    MemoryBudget { required: usize, budget: usize },
    #[error("reduced pose system is singular after damping escalation")]
    SingularSystem,
    #[error("no trajectory associations within max_dt")]
    NoAssociations,
    #[error("degenerate point configuration for similarity alignment")]
    DegenerateConfiguration,
    #[error("malformed index file: {0}")]
    MalformedIndex(String),
    #[error("missing image: {0}")]
    MissingImage(PathBuf),
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("frame {frame}, iteration {iteration}: {source}")]
    AtFrame {
        frame: usize,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Attach pipeline context (which frame / update iteration failed).
    pub fn at_frame(self, frame: usize, iteration: usize) -> Self {
        Error::AtFrame {
            frame,
            iteration,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
