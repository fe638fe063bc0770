//! Monotone post-hoc calibration of classifier logits.
//!
//! Rank-wise scale-and-shift maps (`transform`), their constrained fit
//! (`optim`), reference calibrators (`baselines`), calibration-error metrics
//! (`metrics`) and dataset I/O with a synthetic generator (`data`).

pub mod baselines;
pub mod data;
pub mod error;
pub mod logits;
pub mod metrics;
pub mod optim;
pub mod transform;

pub use baselines::{fit_method, CalibratedModel, FitOptions, FitSummary, Method};
pub use error::{Error, Result};
pub use logits::{LabelVector, LogitMatrix, ProbMatrix, Rows, SortPermutation};
pub use optim::{fit_mcct, FitResult, SolverConfig};
pub use transform::{Mode, MonotoneParams};
