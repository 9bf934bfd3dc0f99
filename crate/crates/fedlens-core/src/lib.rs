//! Federated analytics and learning over decentralized tabular data.
//!
//! A federation server issues statistical, set, and matrix-transformation
//! queries to clients that hold private partitions; only abstracted results
//! (counts, moment sketches, salted digests, Gram matrices, masked vectors)
//! travel back. The analytics feed a skewness-based client selection stage,
//! which in turn picks the cohort for a from-scratch FedAvg regression loop.
//!
//! Per-client work fans out over rayon by default; building with
//! `--no-default-features` swaps in a sequential path with bit-identical
//! results.

pub mod data;
pub mod federation;
pub mod fl;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod query;
pub mod rng;
pub mod selection;
pub mod stats;
pub mod transport;

pub use model::{ClientDataset, Schema};
pub use pipeline::{run_experiment_sim, ExperimentConfig, ExperimentReport};
pub use query::{execute_query, QueryResult, QuerySpec};
pub use selection::{select, SelectionCriteria, SelectionMatrix};
pub use stats::MomentSketch;
