//! Hypothesis tests, multiple-comparison correction, agreement and
//! similarity measures. All tests are two-sided.

mod agreement;
mod battery;
mod fdr;
mod similarity;
mod ttest;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use agreement::{cohens_kappa, jaccard, kappa_from_rates, percent_agreement};
pub use battery::{
    between_battery, between_group_test, within_battery, within_group_test, Baseline, BetweenCell, TopicBetween,
    TopicWithin, WithinCell,
};
pub use fdr::bh_fdr;
pub use similarity::{cosine_similarity, tfidf, tokenize};
pub use ttest::{paired_t, welch_t};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    PairedT,
    WelchT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
    pub p_adjusted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("zero variance: the test statistic is undefined")]
    DegenerateVariance,
    #[error("p-value {0} outside [0, 1]")]
    InvalidPValue(f64),
    #[error("FDR level {0} outside (0, 1)")]
    InvalidLevel(f64),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("both sets are empty")]
    EmptyUnion,
    #[error("no rating pairs")]
    NoPairs,
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub(crate) fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}
