use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Everything that can go wrong inside the numerical engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Focal distances must be strictly increasing.
    NonIncreasingFocalDistances,
    /// Two collections that must pair up element-wise have different lengths.
    CountMismatch {
        expected: usize,
        found: usize,
    },
    /// Grids that must share a shape do not.
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    ChannelMismatch {
        expected: usize,
        found: usize,
    },
    UnsupportedChannels(usize),
    TooFewPlanes(usize),
    GridTooSmall {
        width: usize,
        height: usize,
    },
    PixelOutOfRange {
        value: f64,
    },
    NonFinite(&'static str),
    /// A formula was evaluated outside its domain.
    Domain(&'static str),
    EmptyMask,
    InvalidProbabilities(&'static str),
    InvalidConfig(&'static str),
    Diverged {
        step: usize,
        objective: f64,
        initial: f64,
    },
    UnknownVariant(String),
    EmptyVariants,
    SolverFailed(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonIncreasingFocalDistances => f.write_str("non-increasing focal distances"),
            Error::CountMismatch { expected, found } => {
                write!(f, "count mismatch: expected {expected}, found {found}")
            }
            Error::DimensionMismatch { expected, found } => write!(
                f,
                "dimension mismatch: expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
            Error::ChannelMismatch { expected, found } => {
                write!(f, "channel mismatch: expected {expected}, found {found}")
            }
            Error::UnsupportedChannels(c) => write!(f, "unsupported channel count {c}"),
            Error::TooFewPlanes(n) => write!(f, "need at least 2 focal planes, got {n}"),
            Error::GridTooSmall { width, height } => {
                write!(f, "grid {width}x{height} is too small (minimum 2x2)")
            }
            Error::PixelOutOfRange { value } => write!(f, "pixel value {value} outside [0, 1]"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Domain(what) => write!(f, "domain error: {what}"),
            Error::EmptyMask => f.write_str("no valid pixels"),
            Error::InvalidProbabilities(what) => write!(f, "invalid focus probabilities: {what}"),
            Error::InvalidConfig(what) => write!(f, "invalid configuration: {what}"),
            Error::Diverged {
                step,
                objective,
                initial,
            } => write!(
                f,
                "diverged at step {step}: objective {objective:.6e} exceeds 10x initial {initial:.6e}"
            ),
            Error::UnknownVariant(name) => write!(f, "unknown ablation variant `{name}`"),
            Error::EmptyVariants => f.write_str("no ablation variants given"),
            Error::SolverFailed(what) => write!(f, "linear solver failed: {what}"),
        }
    }
}

impl core::error::Error for Error {}
