//! Stratified nested cross-validation, metrics, and report tables.

mod cv;
mod folds;
mod metrics;

use thiserror::Error;

pub use cv::{
    config_fingerprint, nested_cv, render_table, summarize, CVReport, FoldOutcome, MeanStd,
    MetricSummary,
};
pub use folds::{stratified_folds, stratified_holdout, FoldPlan};
pub use metrics::{compute_metrics, MetricSet, CLASSES};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation error: {0}")]
    Validation(String),
    #[error("no successful folds to aggregate for `{0}`")]
    NoSuccessfulFolds(String),
}
