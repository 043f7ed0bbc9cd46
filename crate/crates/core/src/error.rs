use alloc::string::String;

/// Errors raised by the core numeric routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimensionMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("invalid cluster count {clusters} for {tokens} tokens")]
    InvalidClusterCount { clusters: usize, tokens: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("mask is {mask_q}x{mask_k} but clusterings are {q_clusters}x{k_clusters}")]
    MaskMismatch {
        mask_q: usize,
        mask_k: usize,
        q_clusters: usize,
        k_clusters: usize,
    },
    #[error("knapsack instance exceeds oracle limits ({0}); use the greedy router instead")]
    OracleLimit(String),
    #[error("query {0} has neither exact nor compensated key clusters")]
    EmptySoftmaxRow(usize),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
