use thiserror::Error;

use crate::timeline::Turn;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown subtask code `{0}`")]
    UnknownSubtask(String),

    #[error("missing verdict for ground-truth turn {gt_turn} and response turn {turn}")]
    IncompleteVerdicts { gt_turn: Turn, turn: Turn },

    #[error("sample has responses but no repetition verdict")]
    MissingRepetitionVerdict,

    #[error("repetition multiplier is undefined for {0} samples")]
    ModeMismatch(&'static str),

    #[error("unsupported format_version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("malformed record: {0}")]
    Malformed(String),
}

impl CoreError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidInput(msg.into())
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
