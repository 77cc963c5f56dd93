//! Beta-likelihood mixed model with logit link and per-channel random
//! intercepts:
//!
//! ```text
//! logit(mu_ij) = b0 + b1 time + b2[g] group + b3[g] group x time + b4' cov + u_i
//! u_i ~ N(0, sigma2),   y_ij ~ Beta(mu_ij phi, (1 - mu_ij) phi)
//! ```
//!
//! The marginal likelihood integrates each `u_i` by the Laplace
//! approximation (optionally adaptive Gauss–Hermite). Inference is Wald.

mod battery;
mod data;
mod fit;
mod laplace;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::Group;

pub use battery::{run_topic_battery, Battery, BatteryEntry};
pub use data::{boundary_adjust, build_glmm_data, GlmmData, GlmmObservation};
pub use fit::{fit_beta_glmm, GlmmFit, GlmmTerm};
pub use laplace::{gauss_hermite, MarginalModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Intercept,
    Time,
    Group,
    GroupTime,
    Covariate,
}

impl TermKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TermKind::Intercept => "intercept",
            TermKind::Time => "time",
            TermKind::Group => "group",
            TermKind::GroupTime => "group_time",
            TermKind::Covariate => "covariate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlmmSpec {
    pub reference_group: Group,
    pub include_covariates: bool,
    /// Quadrature nodes per random effect; 1 is the Laplace approximation.
    pub quadrature_order: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for GlmmSpec {
    fn default() -> Self {
        GlmmSpec {
            reference_group: Group::AttemptedDuring,
            include_covariates: true,
            quadrature_order: 1,
            grad_tol: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GlmmError {
    #[error("topic {topic_id}: only {groups} group(s) represented")]
    TooFewGroups { topic_id: u32, groups: usize },
    #[error("group {0} has fewer than two channels")]
    TooFewChannels(Group),
    #[error("reference group {0} absent from the data")]
    MissingReference(Group),
    #[error("rank-deficient design; dependent columns: {0:?}")]
    RankDeficient(Vec<String>),
    #[error("response {0} outside (0, 1)")]
    ResponseOutOfRange(f64),
    #[error("unknown topic {0}")]
    UnknownTopic(u32),
}

/// exp(beta): multiplicative change in the odds.
pub fn odds_ratio(beta: f64) -> f64 {
    beta.exp()
}

/// Percentage change in the odds, `100 (e^beta - 1)`.
pub fn odds_change_percent(beta: f64) -> f64 {
    100.0 * beta.exp_m1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn odds_ratio_examples() {
        assert_abs_diff_eq!(odds_ratio(0.83), 2.293, epsilon = 5e-4);
        assert_eq!(odds_ratio(0.0), 1.0);
        assert_abs_diff_eq!(odds_ratio(-0.31), 0.733, epsilon = 5e-4);
        assert_eq!(odds_change_percent(0.83).round(), 129.0);
        assert_eq!(odds_change_percent(-0.31).round(), -27.0);
    }

    #[test]
    fn odds_ratio_is_monotone() {
        let betas = [-2.0, -0.66, -0.31, 0.0, 0.52, 0.55, 0.76, 0.83, 0.89];
        assert!(betas.windows(2).all(|w| odds_ratio(w[0]) < odds_ratio(w[1])));
    }
}
