//! Learning from strongly and weakly labeled data.
//!
//! `graphswsl` trains a manifold-regularized least-squares model whose
//! positive bags must contain at least one high-scoring instance, solved by
//! the concave-convex procedure. `misvm` provides the miSVM and naiveSWSL
//! baselines, `features` turns frame vectors into GMM soft-count histograms,
//! and `eval` / `pipeline` hold the metrics, cross-validation and benchmark.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod graphswsl;
pub mod kernel;
pub mod misvm;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use config::{AutoOr, KernelSettings, Method, RunConfig};
pub use data::{assemble_training_set, Bag, IndexedDataset, Instance, Label, SwslDataset};
pub use error::{Result, SwslError};
pub use model::Model;
