//! Causal dose-response estimation with data fusion.
//!
//! Records come from several sources, each aligned with the target
//! population in its covariate law, its outcome law, both, or neither. The
//! estimator minimizes a Neyman-orthogonal loss over a kernel function class
//! using every partially aligned record, and compares against the
//! intersection-only (non-fused) estimator.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cv;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod kernel;
pub mod krr;
pub mod loss;
pub mod measure;
pub mod nuisance;
pub mod pipeline;
pub mod seed;
pub mod simulation;

pub use cv::{select_lambda, CVConfig, CVReport, CvMode};
pub use data::{Dataset, EstimationMode, ExtendedRecord, FusionConfig, SampleRecord};
pub use error::{CdrfError, Result};
pub use kernel::{KernelFamily, KernelSpec};
pub use krr::{fit_closed_form, FittedCDRF};
pub use measure::ReferenceMeasure;
pub use nuisance::{NuisanceConfig, NuisanceEval, NuisanceFit};
pub use pipeline::{fit_cdrf, FitResult, KernelConfig, PipelineConfig};
pub use simulation::Family;
