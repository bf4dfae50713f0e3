use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the core library can report.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: String, got: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no valid pixels in {0}")]
    EmptyValidSet(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("frame mismatch: expected {expected}, got {got}")]
    FrameMismatch { expected: String, got: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientMatches { needed: usize, got: usize },
    #[error("descriptor at pixel {pixel} has norm {norm}, expected unit length")]
    NonUnitDescriptor { pixel: usize, norm: f64 },
    #[error("view graph is disconnected")]
    Disconnected,
    #[error("camera sampling exceeded {0} attempts without reaching the overlap target")]
    RetryCapExceeded(usize),
    #[error("missing parameter tensor `{0}`")]
    MissingTensor(String),
    #[error("parameter tensor `{name}` has shape {got}, expected {expected}")]
    TensorShape { name: String, expected: String, got: String },
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: impl core::fmt::Debug, got: impl core::fmt::Debug) -> Self {
        Error::Shape { what, expected: alloc::format!("{expected:?}"), got: alloc::format!("{got:?}") }
    }
}
