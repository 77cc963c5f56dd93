use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{DesignMatrix, RegressionError};
use crate::linalg::{dependent_columns, inverse_spd, mean_sd, solve_spd};
use crate::special::{logistic, normal_two_sided_p};

pub const INTERCEPT: &str = "(Intercept)";

/// Linear-predictor magnitude past which the fit is declared separated.
pub const SEPARATION_BOUND: f64 = 30.0;

const MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Coefficient names, intercept first.
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub z_scores: Vec<f64>,
    pub p_values: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n: usize,
}

impl LogisticFit {
    pub fn aic(&self) -> f64 {
        2.0 * self.coefficients.len() as f64 - 2.0 * self.log_likelihood
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }

    pub fn p_value(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.p_values[i])
    }

    /// Fitted probability for one row of raw features (no intercept).
    pub fn predict(&self, features: &[f64]) -> f64 {
        let eta = self.coefficients[0]
            + self.coefficients[1..].iter().zip(features).map(|(b, x)| b * x).sum::<f64>();
        logistic(eta)
    }
}

pub(crate) fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(0, 1.0)
}

fn log_likelihood(eta: &DVector<f64>, y: &[f64]) -> f64 {
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| {
            // log(1 + e^e) computed stably
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            yi * e - softplus
        })
        .sum()
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares with step-halving.
pub fn fit_logistic(design: &DesignMatrix) -> Result<LogisticFit, RegressionError> {
    if !design.has_both_classes() {
        return Err(RegressionError::SingleClass);
    }
    let n = design.n_rows();
    let p = design.n_features() + 1;
    if n <= p {
        log::warn!("logistic fit with {n} rows and {p} coefficients");
    }
    let x = with_intercept(&design.x);
    let mut names = vec![INTERCEPT.to_string()];
    names.extend(design.names.iter().cloned());

    let dependent = dependent_columns(&x, 1e-9);
    if !dependent.is_empty() {
        return Err(RegressionError::RankDeficient(dependent.iter().map(|&j| names[j].clone()).collect()));
    }
    let y = DVector::from_column_slice(&design.y);
    let sds: Vec<f64> = (0..p).map(|j| if j == 0 { 0.0 } else { mean_sd(x.column(j).iter().copied()).1 }).collect();

    let mut beta = DVector::zeros(p);
    let mut eta = &x * &beta;
    let mut ll = log_likelihood(&eta, &design.y);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let mu = eta.map(logistic);
        let w = mu.map(|m| m * (1.0 - m));
        let score = x.transpose() * (&y - &mu);
        let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * w[i]);
        let info = x.transpose() * xw;
        let Some(step) = solve_spd(&info, &score) else {
            return Err(separation_or_singular(&beta, &eta, &sds, &names));
        };
        let score_small = score.amax() < 1e-8;
        let mut t = 1.0;
        let (mut new_beta, mut new_eta, mut new_ll);
        loop {
            new_beta = &beta + &step * t;
            new_eta = &x * &new_beta;
            new_ll = log_likelihood(&new_eta, &design.y);
            if new_ll >= ll - 1e-12 * ll.abs() || t < 1e-10 {
                break;
            }
            t *= 0.5;
        }
        let rel_change = (new_ll - ll).abs() / ll.abs().max(1e-300);
        let step_small = step.amax() * t < 1e-6 * (1.0 + beta.amax());
        beta = new_beta;
        eta = new_eta;
        ll = new_ll;
        if eta.amax() > SEPARATION_BOUND {
            return Err(separation_or_singular(&beta, &eta, &sds, &names));
        }
        // A tiny score with a large Newton step means the information has
        // collapsed (divergence), not convergence.
        if (score_small || rel_change < 1e-10) && step_small {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(RegressionError::NoConvergence { iterations });
    }

    let mu = eta.map(logistic);
    let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * mu[i] * (1.0 - mu[i]));
    let cov = inverse_spd(&(x.transpose() * xw)).ok_or_else(|| RegressionError::RankDeficient(vec![]))?;
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let standard_errors: Vec<f64> = (0..p).map(|j| cov[(j, j)].sqrt()).collect();
    let z_scores: Vec<f64> = coefficients.iter().zip(&standard_errors).map(|(b, s)| b / s).collect();
    let p_values = z_scores.iter().map(|&z| normal_two_sided_p(z)).collect();
    Ok(LogisticFit { names, coefficients, standard_errors, z_scores, p_values, log_likelihood: ll, converged, iterations, n })
}

fn separation_or_singular(beta: &DVector<f64>, eta: &DVector<f64>, sds: &[f64], names: &[String]) -> RegressionError {
    if eta.amax() > SEPARATION_BOUND / 2.0 && names.len() > 1 {
        let (j, _) = (1..names.len())
            .map(|j| (j, (beta[j] * sds[j]).abs()))
            .fold((1, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        RegressionError::Separation { feature: names[j].clone() }
    } else if eta.amax() > SEPARATION_BOUND / 2.0 {
        RegressionError::Separation { feature: INTERCEPT.to_string() }
    } else {
        RegressionError::RankDeficient(vec![])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intercept_only(y: Vec<f64>) -> DesignMatrix {
        let n = y.len();
        DesignMatrix::new(vec![], DMatrix::zeros(n, 0), y, (0..n).map(|i| i.to_string()).collect()).unwrap()
    }

    #[test]
    fn intercept_only_mle_is_logit_of_mean() {
        let fit = fit_logistic(&intercept_only(vec![1.0, 1.0, 1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 3f64.ln(), epsilon = 1e-9);
        let fit = fit_logistic(&intercept_only(vec![1.0, 0.0, 1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 0.0, epsilon = 1e-12);
        assert!(fit.converged);
    }

    #[test]
    fn separated_feature_is_named() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, ((i * 7) % 5) as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| if i >= 10 { 1.0 } else { 0.0 }).collect();
        let d = DesignMatrix::from_rows(vec!["sep".into(), "noise".into()], &rows, y, (0..20).map(|i| i.to_string()).collect()).unwrap();
        match fit_logistic(&d) {
            Err(RegressionError::Separation { feature }) => assert_eq!(feature, "sep"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let d = DesignMatrix::from_rows(vec!["a".into(), "b".into()], &rows, y, (0..10).map(|i| i.to_string()).collect()).unwrap();
        assert_eq!(fit_logistic(&d).unwrap_err(), RegressionError::RankDeficient(vec!["b".into()]));
        let single = intercept_only(vec![1.0, 1.0]);
        assert_eq!(fit_logistic(&single).unwrap_err(), RegressionError::SingleClass);
    }

    fn simulated(seed: u64, n: usize) -> DesignMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = vec![];
        let mut y = vec![];
        for _ in 0..n {
            let a: f64 = rng.random_range(-2.0..2.0);
            let b: f64 = rng.random_range(0.0..5.0);
            let eta = -0.5 + 1.2 * a - 0.4 * b;
            y.push(if rng.random::<f64>() < logistic(eta) { 1.0 } else { 0.0 });
            rows.push(vec![a, b]);
        }
        DesignMatrix::from_rows(vec!["a".into(), "b".into()], &rows, y, (0..n).map(|i| i.to_string()).collect()).unwrap()
    }

    #[test]
    fn score_vanishes_at_the_fit() {
        let d = simulated(3, 500);
        let fit = fit_logistic(&d).unwrap();
        let x = with_intercept(&d.x);
        let beta = DVector::from_vec(fit.coefficients.clone());
        let mu = (&x * beta).map(logistic);
        let score = x.transpose() * (DVector::from_vec(d.y.clone()) - mu);
        assert!(score.amax() < 1e-6);
        assert!((fit.coefficients[1] - 1.2).abs() < 0.4);
    }

    #[test]
    fn affine_equivariance() {
        let d = simulated(9, 300);
        let fit = fit_logistic(&d).unwrap();
        let mut scaled = d.clone();
        for v in scaled.x.column_mut(1).iter_mut() {
            *v = *v * 4.0 + 7.0;
        }
        let fit2 = fit_logistic(&scaled).unwrap();
        assert_abs_diff_eq!(fit2.coefficients[2], fit.coefficients[2] / 4.0, epsilon = 1e-8);
        for i in 0..d.n_rows() {
            let r1: Vec<f64> = d.x.row(i).iter().copied().collect();
            let r2: Vec<f64> = scaled.x.row(i).iter().copied().collect();
            assert_abs_diff_eq!(fit.predict(&r1), fit2.predict(&r2), epsilon = 1e-10);
        }
    }
}
