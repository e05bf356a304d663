//! Semi-supervised out-of-sample interpolation (SOSI) for classification.
//!
//! The pipeline embeds labeled training samples with a class-aware graph
//! embedding, fits a per-dimension Gaussian RBF interpolator whose scales are
//! chosen by a direction-aware regularizer, and then progressively admits
//! high-confidence unlabeled points as kernel centers while re-estimating
//! labels. Baseline out-of-sample extensions and an experiment harness are
//! included for comparison studies.

pub mod baselines;
pub mod dataset;
pub mod embedding;
pub mod graph;
pub mod harness;
pub mod rbf;
pub mod sosi;

pub use dataset::Dataset;
pub use embedding::Embedding;
pub use graph::{ClassGraphs, NeighborTable};
pub use harness::{ExperimentConfig, ReportRow, Strategy};
pub use rbf::RbfInterpolator;
pub use sosi::{LabelState, SosiConfig, SosiRun};
