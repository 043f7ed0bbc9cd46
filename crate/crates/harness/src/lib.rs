//! Tensor files, run configuration and the commands behind the `ear` binary.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod tensor;

pub use cli::Cli;
pub use commands::execute;
pub use error::CliError;

/// Column order of sweep CSV files.
pub const CSV_HEADER: [&str; 9] = [
    "policy",
    "density",
    "relaxed_objective",
    "map_mse",
    "output_mse",
    "flops",
    "seed",
    "c_q",
    "c_k",
];
