use serde::{Deserialize, Serialize};

use super::{fit_logistic, DesignMatrix, LogisticFit, RegressionError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Criterion {
    /// Accept a move only if AIC drops by more than `threshold`.
    Aic { threshold: f64 },
    /// Enter when the Wald p-value is below `enter`, remove above `remove`.
    PValue { enter: f64, remove: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepwiseConfig {
    pub criterion: Criterion,
    pub max_steps: usize,
}

impl Default for StepwiseConfig {
    fn default() -> Self {
        StepwiseConfig { criterion: Criterion::Aic { threshold: 0.0 }, max_steps: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    Add,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub action: StepAction,
    pub feature: String,
    /// AIC before and after the move.
    pub criterion_before: f64,
    pub criterion_after: f64,
    /// Wald p-value of the feature that entered or left (p-value mode).
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub steps: Vec<Step>,
    /// Selected features in column order.
    pub final_features: Vec<String>,
}

impl SelectionTrace {
    /// Applies the recorded moves to the empty model.
    pub fn replay(&self) -> Vec<String> {
        let mut set: Vec<String> = Vec::new();
        for s in &self.steps {
            match s.action {
                StepAction::Add => set.push(s.feature.clone()),
                StepAction::Drop => set.retain(|f| f != &s.feature),
            }
        }
        set
    }
}

fn fit_subset(design: &DesignMatrix, cols: &[usize]) -> Result<LogisticFit, RegressionError> {
    let mut sorted = cols.to_vec();
    sorted.sort_unstable();
    fit_logistic(&design.select(&sorted))
}

/// Forward-backward stepwise selection from the empty model. Each round
/// tries one addition, then removals until none improves. Candidates whose
/// fit fails (separation, rank deficiency) are skipped. Ties go to the
/// lowest column index.
pub fn stepwise_select(
    design: &DesignMatrix,
    config: &StepwiseConfig,
) -> Result<(SelectionTrace, LogisticFit), RegressionError> {
    let mut included: Vec<usize> = Vec::new();
    let mut current = fit_subset(design, &included)?;
    let mut steps = Vec::new();
    loop {
        let mut moved = false;

        // forward
        let mut best: Option<(usize, LogisticFit, f64)> = None;
        for j in 0..design.n_features() {
            if included.contains(&j) {
                continue;
            }
            let mut cols = included.clone();
            cols.push(j);
            let Ok(fit) = fit_subset(design, &cols) else { continue };
            let score = match config.criterion {
                Criterion::Aic { .. } => fit.aic(),
                Criterion::PValue { .. } => fit.p_value(&design.names[j]).unwrap_or(1.0),
            };
            if best.as_ref().is_none_or(|b| score < b.2) {
                best = Some((j, fit, score));
            }
        }
        if let Some((j, fit, score)) = best {
            let accept = match config.criterion {
                Criterion::Aic { threshold } => score < current.aic() - threshold,
                Criterion::PValue { enter, .. } => score < enter,
            };
            if accept {
                steps.push(Step {
                    action: StepAction::Add,
                    feature: design.names[j].clone(),
                    criterion_before: current.aic(),
                    criterion_after: fit.aic(),
                    p_value: fit.p_value(&design.names[j]),
                });
                included.push(j);
                current = fit;
                moved = true;
            }
        }

        // backward, repeated
        loop {
            if steps.len() > config.max_steps {
                return Err(RegressionError::StepLimit(config.max_steps));
            }
            let mut order = included.clone();
            order.sort_unstable();
            let mut best: Option<(usize, LogisticFit, f64)> = None;
            for &j in &order {
                let without: Vec<usize> = included.iter().copied().filter(|&c| c != j).collect();
                let score = match config.criterion {
                    Criterion::Aic { .. } => None,
                    Criterion::PValue { .. } => Some(current.p_value(&design.names[j]).unwrap_or(1.0)),
                };
                // AIC: lowest wins; p-value: largest p leaves first
                if let (Some(s), Some(b)) = (score, best.as_ref()) {
                    if s <= b.2 {
                        continue;
                    }
                }
                let Ok(fit) = fit_subset(design, &without) else { continue };
                let score = score.unwrap_or_else(|| fit.aic());
                let better = match (&best, config.criterion) {
                    (None, _) => true,
                    (Some(b), Criterion::Aic { .. }) => score < b.2,
                    (Some(b), Criterion::PValue { .. }) => score > b.2,
                };
                if better {
                    best = Some((j, fit, score));
                }
            }
            let Some((j, fit, score)) = best else { break };
            let accept = match config.criterion {
                Criterion::Aic { threshold } => score < current.aic() - threshold,
                Criterion::PValue { remove, .. } => score > remove,
            };
            if !accept {
                break;
            }
            steps.push(Step {
                action: StepAction::Drop,
                feature: design.names[j].clone(),
                criterion_before: current.aic(),
                criterion_after: fit.aic(),
                p_value: current.p_value(&design.names[j]),
            });
            included.retain(|&c| c != j);
            current = fit;
            moved = true;
        }

        if !moved {
            break;
        }
        if steps.len() > config.max_steps {
            return Err(RegressionError::StepLimit(config.max_steps));
        }
    }
    included.sort_unstable();
    let final_features = included.iter().map(|&j| design.names[j].clone()).collect();
    Ok((SelectionTrace { steps, final_features }, current))
}
