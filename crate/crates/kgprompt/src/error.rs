//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used by every fallible function in the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error for graph handling, encoding, training and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Input bytes are not a well-formed graph, cache, config or manifest.
    #[error("malformed file: {0}")]
    MalformedFile(String),

    /// A triple names an entity id or relation that the graph does not define.
    #[error("dangling reference: {0}")]
    DanglingReference(String),

    /// A declared category anchors no entity.
    #[error("category `{0}` has no entities")]
    EmptyCategory(String),

    /// A lookup named a category the graph does not declare.
    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    /// Two pieces of data disagree about which category they belong to.
    #[error("category mismatch: expected `{expected}`, got `{got}`")]
    CategoryMismatch { expected: String, got: String },

    /// A remote endpoint could not be reached or returned a failure status.
    #[error("network error: {0}")]
    NetworkError(String),

    /// A remote endpoint answered with bytes this crate cannot interpret.
    #[error("unparseable response: {0}")]
    UnparseableResponse(String),

    /// A remote endpoint answered with empty content.
    #[error("empty response from endpoint")]
    EmptyResponse,

    /// Two tensors that must share a dimension do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A text encoder produced an unusable feature.
    #[error("text encoder failure: {0}")]
    EncoderFailure(String),

    /// The requested encoder backend is not compiled in or not configured.
    #[error("encoder backend unavailable: {0}")]
    BackendUnavailable(String),

    /// The image side length is not divisible by the patch grid size.
    #[error("image side {side} is not divisible by patch grid {grid}")]
    IndivisibleGrid { side: usize, grid: usize },

    /// Softmax temperature must be strictly positive.
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    /// A gradient component left the finite range.
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    /// A parameter update produced a non-finite value.
    #[error("non-finite parameter update in {0}")]
    NonFiniteUpdate(String),

    /// The training loss left the finite range.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// A score set or manifest split is missing one of the two classes.
    #[error("empty class: {0}")]
    EmptyClass(String),

    /// A protocol needs more distinct subjects than the manifest provides.
    #[error("too few subjects: need {needed}, have {available}")]
    TooFewSubjects { needed: usize, available: usize },

    /// No threshold attains the requested attack error rate exactly.
    #[error("operating point APCER = {target} is unreachable: {reason}")]
    UnreachableOperatingPoint { target: f64, reason: String },

    /// A config value is missing, out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Filesystem access failed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wraps an [`std::io::Error`] together with the path that produced it.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
