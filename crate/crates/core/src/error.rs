use thiserror::Error;

/// How the CLI maps an error to an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed input, schema violation, or a presentation that fails validation.
    Input,
    /// A numerical procedure did not produce an answer.
    Numerical,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("INFEASIBLE: {0}")]
    Infeasible(String),
    #[error("BAD_DIM: {0}")]
    BadDim(String),
    #[error("NOT_MEMBER: {0}")]
    NotMember(String),
    #[error("NOT_MAPPED: {0}")]
    NotMapped(String),
    #[error("DEGREE_OVERFLOW: {0}")]
    DegreeOverflow(String),
    #[error("DEGREE_MISMATCH: {0}")]
    DegreeMismatch(String),
    #[error("NONCONVERGED: {0}")]
    NonConverged(String),
    #[error("REJECTED: {0}")]
    Rejected(String),
    #[error("NOT_TRANSVERSE: {0}")]
    NotTransverse(String),
    #[error("NOT_LOCALLY_FINITE: {0}")]
    NotLocallyFinite(String),
    #[error("BAD_NESTING: {0}")]
    BadNesting(String),
    #[error("GROUP_NOT_CLOSED: {0}")]
    GroupNotClosed(String),
    #[error("BAD_INCLUSION: {0}")]
    BadInclusion(String),
    #[error("CANNOT_COVER: {0}")]
    CannotCover(String),
    #[error("CANNOT_SCALE: {0}")]
    CannotScale(String),
    #[error("NOT_SUBMERSION: {0}")]
    NotSubmersion(String),
    #[error("NOT_COVERING: {0}")]
    NotCovering(String),
    #[error("AXIOM_VIOLATION at step {step}, chart {chart}: {detail}")]
    AxiomViolation { step: usize, chart: usize, detail: String },
    #[error("SUPPORT_ESCAPE: {0}")]
    SupportEscape(String),
    #[error("NO_TRANSVERSE_FOUND: {0}")]
    NoTransverseFound(String),
    #[error("DIM_UNSUPPORTED: {0}")]
    DimUnsupported(String),
    #[error("REFINEMENT_FAILED: {0}")]
    RefinementFailed(String),
    #[error("COVER_FAIL: {0}")]
    CoverFail(String),
    #[error("NOT_UNITARY: {0}")]
    NotUnitary(String),
    #[error("IO: {0}")]
    Io(String),
    #[error("SCHEMA: {0}")]
    Schema(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Infeasible(_) => "INFEASIBLE",
            Error::BadDim(_) => "BAD_DIM",
            Error::NotMember(_) => "NOT_MEMBER",
            Error::NotMapped(_) => "NOT_MAPPED",
            Error::DegreeOverflow(_) => "DEGREE_OVERFLOW",
            Error::DegreeMismatch(_) => "DEGREE_MISMATCH",
            Error::NonConverged(_) => "NONCONVERGED",
            Error::Rejected(_) => "REJECTED",
            Error::NotTransverse(_) => "NOT_TRANSVERSE",
            Error::NotLocallyFinite(_) => "NOT_LOCALLY_FINITE",
            Error::BadNesting(_) => "BAD_NESTING",
            Error::GroupNotClosed(_) => "GROUP_NOT_CLOSED",
            Error::BadInclusion(_) => "BAD_INCLUSION",
            Error::CannotCover(_) => "CANNOT_COVER",
            Error::CannotScale(_) => "CANNOT_SCALE",
            Error::NotSubmersion(_) => "NOT_SUBMERSION",
            Error::NotCovering(_) => "NOT_COVERING",
            Error::AxiomViolation { .. } => "AXIOM_VIOLATION",
            Error::SupportEscape(_) => "SUPPORT_ESCAPE",
            Error::NoTransverseFound(_) => "NO_TRANSVERSE_FOUND",
            Error::DimUnsupported(_) => "DIM_UNSUPPORTED",
            Error::RefinementFailed(_) => "REFINEMENT_FAILED",
            Error::CoverFail(_) => "COVER_FAIL",
            Error::NotUnitary(_) => "NOT_UNITARY",
            Error::Io(_) => "IO",
            Error::Schema(_) => "SCHEMA",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonConverged(_)
            | Error::NoTransverseFound(_)
            | Error::RefinementFailed(_)
            | Error::CannotScale(_)
            | Error::CannotCover(_)
            | Error::CoverFail(_)
            | Error::AxiomViolation { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Input,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
