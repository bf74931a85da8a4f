//! Graph neural network regularizers for explainable attribution, with
//! planted-motif benchmarks.
//!
//! The crate trains a small graph-convolutional network whose last-layer
//! node embeddings feed a global-average-pool readout. Two optional
//! regularizers reshape what that network learns:
//!
//! * BRO pushes each graph's node embeddings toward orthonormal rows.
//! * Gini division raises the sparsity of each output-weight row.
//!
//! Attribution methods ([`attribution`]) score nodes for a task; the
//! [`benchmark`] module measures them against exact ground truth on
//! synthetic graphs.
//!
//! ```
//! use grattr::benchmark::{SyntheticTask, TaskSpec};
//!
//! let spec = TaskSpec { num_graphs: 10, ..TaskSpec::new(SyntheticTask::RingMotif) };
//! let data = spec.generate()?;
//! assert_eq!(data.len(), 10);
//! # Ok::<(), grattr::Error>(())
//! ```

pub mod attribution;
pub mod benchmark;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod regularizers;
pub mod report;
pub mod smiles;
pub mod tensor;

pub use error::{Error, Result};
pub use matrix::Matrix;

// The guide's snippets run as doctests so the book cannot drift from the API.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    pub mod models {}
    #[doc = include_str!("../../../book/src/regularizers.md")]
    pub mod regularizers {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/attribution.md")]
    pub mod attribution {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    pub mod benchmarks {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
