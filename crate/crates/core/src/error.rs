use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: dimension mismatch ({left:?} vs {right:?})")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("mask row {row} has no unmasked entry")]
    FullyMaskedRow { row: usize },

    #[error("mask entry at ({row}, {col}) is {value}; expected 0 or -inf")]
    InvalidMaskEntry { row: usize, col: usize, value: f64 },

    #[error("visual index {index} out of range (n_visual = {n_visual})")]
    VisualIndexOutOfRange { index: usize, n_visual: usize },

    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),

    #[error("invalid prune config: {0}")]
    InvalidPrune(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("head activity undefined at layer {layer}, head {head}: text statistic is zero")]
    ZeroDenominator { layer: usize, head: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
