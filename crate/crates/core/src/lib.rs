//! Trust-region inexact Newton methods with progressive subsampling for
//! l2-regularized logistic regression and l2-SVM on sparse data.

pub mod dataio;
pub mod harness;
pub mod loss;
pub mod optimizer;
pub mod subproblem;

pub use dataio::{IndexSubset, SparseDataset};
pub use loss::{LocalModel, LossKind, LossModel, Objective};
pub use optimizer::{RunOptions, RunOutput, RunTrace, SubsampleSchedule, TraceRow, TrustRegionConfig};
