use thiserror::Error;

/// Errors raised anywhere in the heart-rate modelling pipeline.
///
/// Messages are prefixed with the owning subsystem so CLI output can be
/// traced back without a backtrace.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // --- signal pipeline ---
    #[error("signal: malformed CSV header: {0}")]
    MalformedHeader(String),
    #[error("signal: malformed CSV row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("signal: time not strictly increasing at row {row} ({prev} s then {next} s)")]
    NonMonotonicTime { row: usize, prev: f64, next: f64 },
    #[error("signal: non-positive {signal} value {value} at row {row}")]
    NonPositiveSignal { row: usize, signal: &'static str, value: f64 },
    #[error("signal: row {row} carries neither vo2 nor hr")]
    EmptySample { row: usize },
    #[error("signal: insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("signal: window {window} exceeds segment length {segment_len}")]
    WindowTooLarge { window: usize, segment_len: usize },
    #[error("signal: bad filter window {window} for polyorder {polyorder}")]
    BadWindow { window: usize, polyorder: usize },

    // --- physiological model ---
    #[error("physio: non-positive VO2 ({0} L/min) passed to a logarithm")]
    NonPositiveVo2(f64),
    #[error("physio: singular ODE, 1 - l5*g = {denominator:e} at sample {index}")]
    Singularity { index: usize, denominator: f64 },
    #[error("physio: inverted pressures, SBP {sbp} < DBP {dbp}")]
    InvertedPressures { sbp: f64, dbp: f64 },
    #[error("physio: segment of {len} samples is too short (need {min})")]
    SegmentTooShort { len: usize, min: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    // --- network / training ---
    #[error("nn: bad bounds ({lo}, {hi})")]
    BadBounds { lo: f64, hi: f64 },
    #[error("nn: value {value} outside open interval ({lo}, {hi})")]
    OutOfBounds { value: f64, lo: f64, hi: f64 },
    #[error("nn: non-finite loss")]
    NonFiniteLoss,
    #[error("nn: non-finite gradient entry at flat index {0}")]
    NonFiniteGradient(usize),
    #[error("nn: finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("nn: parameter shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training: empty series")]
    EmptySeries,
    #[error("training: invalid config: {0}")]
    InvalidConfig(String),

    // --- statistics ---
    #[error("stats: reference series is constant")]
    ConstantReference,
    #[error("stats: all paired differences are zero")]
    AllZeroDifferences,
    #[error("stats: differences have zero variance")]
    ZeroVariance,
    #[error("stats: empty input")]
    EmptyInput,
    #[error("stats: degenerate regression design: {0}")]
    DegenerateDesign(String),

    #[error("io: {0}")]
    IoFailure(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::IoFailure(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::IoFailure(format!("json: {e}"))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::IoFailure(format!("csv: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
