use thiserror::Error;

use crate::model::Token;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("vocabulary needs at least 2 tokens, got {0}")]
    VocabTooSmall(usize),
    #[error("eos token {eos} outside vocabulary of size {size}")]
    EosOutOfRange { eos: Token, size: usize },
    #[error("token {token} outside vocabulary of size {size}")]
    TokenOutOfRange { token: Token, size: usize },
    #[error("row has {got} entries, vocabulary has {expected}")]
    RowLength { expected: usize, got: usize },
    #[error("row entry {index} is negative or not finite ({value})")]
    BadEntry { index: usize, value: f64 },
    #[error("row sums to {sum}, which is off from 1 by more than {tolerance}")]
    Unnormalized { sum: f64, tolerance: f64 },
    #[error("row has no positive mass to normalize")]
    ZeroMass,
    #[error("models disagree on vocabulary ({0} vs {1})")]
    VocabMismatch(usize, usize),
    #[error("distributions have different support sizes ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("empty residual: no remaining target mass after prefix")]
    EmptyResidual,
    #[error("enumeration needs {needed} atoms, budget is {limit}")]
    BudgetExceeded { needed: u128, limit: u128 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("model spec {field}: {message}")]
    Spec { field: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
