//! Error taxonomy shared by the whole crate.
//!
//! Variants are grouped so a caller (notably the CLI) can map them onto
//! coarse failure classes: bad input, missing coverage, numeric
//! degeneracy, and file-format damage.

use thiserror::Error;

/// Everything that can go wrong in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed in something structurally invalid (bad shapes, empty
    /// plans, out-of-range parameters, mismatched metadata).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two grids that must match do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A grid cannot support the requested operation at all.
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),

    /// Not enough data to cover a required day-of-year or tuple.
    #[error("missing coverage: {0}")]
    MissingCoverage(String),

    /// Every cell of the inputs is masked out.
    #[error("all cells masked")]
    AllMasked,

    /// Correlation is undefined because an anomaly field has zero norm.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// A spectrum has no power over the selected wavenumber band.
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    /// Skill score denominator is zero or non-finite.
    #[error("undefined skill: {0}")]
    UndefinedSkill(String),

    /// The grid is too small for the requested multi-scale analysis.
    #[error("grid too small: {0}")]
    GridTooSmall(String),

    /// File does not start with the GF1 magic bytes.
    #[error("bad magic: not a GF1 file")]
    BadMagic,

    /// GF1 header is unreadable or internally inconsistent.
    #[error("bad header: {0}")]
    BadHeader(String),

    /// Payload ends before the header-declared size.
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },

    /// Payload is longer than the header declares.
    #[error("header/payload size mismatch: {extra} trailing bytes")]
    SizeMismatch { extra: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name for the variant, for log lines and the
    /// CLI's single-line error output.
    pub fn kind_slug(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::DegenerateGrid(_) => "degenerate_grid",
            Error::MissingCoverage(_) => "missing_coverage",
            Error::AllMasked => "all_masked",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
            Error::DegenerateSpectrum(_) => "degenerate_spectrum",
            Error::UndefinedSkill(_) => "undefined_skill",
            Error::GridTooSmall(_) => "grid_too_small",
            Error::BadMagic => "bad_magic",
            Error::BadHeader(_) => "bad_header",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Coarse classification used for process exit codes and for the
    /// partial-tolerant run summary.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::MissingCoverage(_) => ErrorClass::Coverage,
            Error::DegenerateGrid(_)
            | Error::AllMasked
            | Error::UndefinedCorrelation(_)
            | Error::DegenerateSpectrum(_)
            | Error::UndefinedSkill(_)
            | Error::GridTooSmall(_) => ErrorClass::Degenerate,
            _ => ErrorClass::Input,
        }
    }
}

/// Failure class, ordered by severity for exit-code purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    /// Malformed arguments, files, or shapes.
    Input,
    /// Required data absent.
    Coverage,
    /// Inputs valid but numerically unusable.
    Degenerate,
}

pub type Result<T> = std::result::Result<T, Error>;
