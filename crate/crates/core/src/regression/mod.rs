//! Logistic regression, stepwise and L1-penalized selection, and design
//! matrices for topic selection and factor analysis.

mod design;
mod lasso;
mod logistic;
mod stepwise;

use thiserror::Error;

pub use design::{build_pre_event_design, one_hot, topic_feature_name, ControlSelector, DesignMatrix, OneHot};
pub use lasso::{cv_lasso, default_lambdas, lambda_max, lasso_logistic, LassoConfig, LassoCv, LassoPath, LassoSolution};
pub use logistic::{fit_logistic, LogisticFit, INTERCEPT, SEPARATION_BOUND};
pub use stepwise::{stepwise_select, Criterion, SelectionTrace, Step, StepAction, StepwiseConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegressionError {
    #[error("malformed design: {0}")]
    Shape(String),
    #[error("outcome has a single class")]
    SingleClass,
    #[error("no control rows for selector `{0}`")]
    EmptyControls(String),
    #[error("perfect separation: linear predictor diverges along `{feature}`")]
    Separation { feature: String },
    #[error("rank-deficient design; dependent columns: {0:?}")]
    RankDeficient(Vec<String>),
    #[error("IRLS did not converge in {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("stepwise search exceeded {0} steps")]
    StepLimit(usize),
    #[error("lasso did not converge at lambda {lambda}: KKT violation {kkt_violation}")]
    LassoNoConvergence { lambda: f64, kkt_violation: f64 },
}
