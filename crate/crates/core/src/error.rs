use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("cannot step a state whose episode is already done")]
    SteppedDoneState,
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("sequence length mismatch: {0}")]
    LengthMismatch(&'static str),
    #[error("parameter out of range: {0}")]
    OutOfRange(String),
    #[error("initial-state sampler found no collision-free state in {tries} tries")]
    SamplerExhausted { tries: usize },
    #[error("pose lies outside the occupancy grid")]
    OutsideGrid,
    #[error("malformed grid file: {0}")]
    GridFormat(String),
    #[error("missing noise records: need {needed}, have {have}")]
    MissingNoise { needed: usize, have: usize },
    #[error("unknown formulation `{0}`")]
    UnknownFormulation(String),
    #[error("unknown environment `{0}`")]
    UnknownEnvironment(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {what} at update {update}")]
    NonFinite { what: &'static str, update: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
