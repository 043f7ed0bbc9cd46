//! Block-sparse attention with error-aware routing and centroid compensation.
//!
//! Queries and keys are clustered; attention is then decided per block of
//! (query cluster, key cluster). Selected blocks run exactly, the rest are
//! approximated by one centroid logit and value per key cluster. A cheap
//! centroid-based error table ranks blocks, and a knapsack-style router picks
//! which ones to compute under an entry budget.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod clustering;
pub mod error;
pub mod estimator;
pub mod knapsack;
pub mod linalg;
pub mod oracle;
pub mod router;
pub mod sparse;
pub mod synth;

pub use analysis::{BoundReport, PipelineConfig, Policy, Precision, Prepared, SweepRecord};
pub use clustering::{ClusterModel, ClusteringQuality, KMeans};
pub use error::{Error, Result};
pub use estimator::{BlockErrorTable, EstimatorMode};
pub use linalg::{Matrix, TokenMatrix};
pub use router::{BlockMask, DensityBudget, EntryBudget, RouterConfig};
pub use sparse::{AttentionResult, FlopCounter, SparseAttention};
pub use synth::{BlobSpec, Instance};
