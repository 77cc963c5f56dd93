//! L1-penalized logistic regression by proximal Newton (IRLS outer loop,
//! cyclic coordinate descent inner loop) on standardized features.
//!
//! The objective is `-loglik / n + lambda * sum |beta_j|` over standardized
//! coefficients; the intercept is unpenalized.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DesignMatrix, RegressionError};
use crate::linalg::mean_sd;
use crate::special::logistic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub kkt_tol: f64,
    pub max_sweeps: usize,
    /// Stop the default path once this fraction of null deviance is explained.
    pub max_dev_ratio: f64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig { n_lambda: 50, lambda_min_ratio: 1e-3, kkt_tol: 1e-7, max_sweeps: 10_000, max_dev_ratio: 0.999 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoSolution {
    pub lambda: f64,
    /// Intercept and coefficients on the original feature scale.
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub std_coefficients: Vec<f64>,
    pub support: Vec<String>,
    pub kkt_violation: f64,
    pub sweeps: usize,
    pub deviance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub names: Vec<String>,
    pub lambda_max: f64,
    pub null_deviance: f64,
    pub solutions: Vec<LassoSolution>,
}

struct Standardized {
    /// Column-major standardized features; constant columns are all zero.
    cols: Vec<Vec<f64>>,
    means: Vec<f64>,
    sds: Vec<f64>,
    y: Vec<f64>,
}

impl Standardized {
    fn new(d: &DesignMatrix) -> Self {
        let mut cols = Vec::with_capacity(d.n_features());
        let mut means = Vec::new();
        let mut sds = Vec::new();
        for j in 0..d.n_features() {
            let col = d.x.column(j);
            let (m, s) = mean_sd(col.iter().copied());
            let sd_ok = s > 1e-12 * m.abs().max(1.0);
            cols.push(col.iter().map(|v| if sd_ok { (v - m) / s } else { 0.0 }).collect());
            means.push(m);
            sds.push(if sd_ok { s } else { 0.0 });
        }
        Standardized { cols, means, sds, y: d.y.clone() }
    }

    fn n(&self) -> usize {
        self.y.len()
    }

    fn eta(&self, b0: f64, b: &[f64]) -> Vec<f64> {
        let mut eta = vec![b0; self.n()];
        for (col, &bj) in self.cols.iter().zip(b) {
            if bj != 0.0 {
                for (e, x) in eta.iter_mut().zip(col) {
                    *e += bj * x;
                }
            }
        }
        eta
    }

    fn loglik(&self, eta: &[f64]) -> f64 {
        eta.iter()
            .zip(&self.y)
            .map(|(&e, &y)| {
                let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
                y * e - softplus
            })
            .sum()
    }

    fn objective(&self, b0: f64, b: &[f64], lambda: f64) -> f64 {
        -self.loglik(&self.eta(b0, b)) / self.n() as f64 + lambda * b.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Largest KKT violation at `(b0, b)`.
    fn kkt(&self, b0: f64, b: &[f64], lambda: f64) -> f64 {
        let n = self.n() as f64;
        let resid: Vec<f64> = self.eta(b0, b).iter().zip(&self.y).map(|(&e, &y)| y - logistic(e)).collect();
        let mut worst = (resid.iter().sum::<f64>() / n).abs();
        for (j, col) in self.cols.iter().enumerate() {
            if self.sds[j] == 0.0 {
                continue;
            }
            let g = col.iter().zip(&resid).map(|(x, r)| x * r).sum::<f64>() / n;
            let v = if b[j] != 0.0 { (g - lambda * b[j].signum()).abs() } else { (g.abs() - lambda).max(0.0) };
            worst = worst.max(v);
        }
        worst
    }
}

fn soft_threshold(c: f64, lambda: f64) -> f64 {
    if c > lambda {
        c - lambda
    } else if c < -lambda {
        c + lambda
    } else {
        0.0
    }
}

/// Smallest penalty at which every feature coefficient is zero.
pub fn lambda_max(design: &DesignMatrix) -> f64 {
    let s = Standardized::new(design);
    let n = s.n() as f64;
    let ybar = s.y.iter().sum::<f64>() / n;
    s.cols
        .iter()
        .map(|col| (col.iter().zip(&s.y).map(|(x, y)| x * (y - ybar)).sum::<f64>() / n).abs())
        .fold(0.0, f64::max)
}

/// Default path: `n_lambda` log-spaced values from `lambda_max` down to
/// `lambda_min_ratio * lambda_max`.
pub fn default_lambdas(lmax: f64, cfg: &LassoConfig) -> Vec<f64> {
    let k = cfg.n_lambda.max(1);
    if k == 1 {
        return vec![lmax];
    }
    (0..k)
        .map(|i| lmax * cfg.lambda_min_ratio.powf(i as f64 / (k - 1) as f64))
        .collect()
}

fn solve(
    s: &Standardized,
    lambda: f64,
    b0: &mut f64,
    b: &mut [f64],
    cfg: &LassoConfig,
) -> Result<(f64, usize), RegressionError> {
    let n = s.n();
    let nf = n as f64;
    let mut sweeps = 0;
    loop {
        let kkt = s.kkt(*b0, b, lambda);
        if kkt < cfg.kkt_tol {
            return Ok((kkt, sweeps));
        }
        if sweeps >= cfg.max_sweeps {
            return Err(RegressionError::LassoNoConvergence { lambda, kkt_violation: kkt });
        }
        // quadratic approximation at the current point
        let eta = s.eta(*b0, b);
        let mu: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
        let w: Vec<f64> = mu.iter().map(|m| (m * (1.0 - m)).max(1e-5)).collect();
        let z: Vec<f64> = (0..n).map(|i| eta[i] + (s.y[i] - mu[i]) / w[i]).collect();
        let mut nb0 = *b0;
        let mut nb = b.to_vec();
        let mut r: Vec<f64> = (0..n).map(|i| z[i] - eta[i]).collect();
        let wsum: f64 = w.iter().sum();
        let a: Vec<f64> = s.cols.iter().map(|c| c.iter().zip(&w).map(|(x, wi)| wi * x * x).sum::<f64>() / nf).collect();
        loop {
            sweeps += 1;
            let mut max_change = 0.0f64;
            let d0 = r.iter().zip(&w).map(|(ri, wi)| ri * wi).sum::<f64>() / wsum;
            nb0 += d0;
            for ri in r.iter_mut() {
                *ri -= d0;
            }
            max_change = max_change.max(d0.abs() * (wsum / nf).sqrt());
            for (j, col) in s.cols.iter().enumerate() {
                if s.sds[j] == 0.0 {
                    continue;
                }
                let c = col.iter().zip(&r).zip(&w).map(|((x, ri), wi)| wi * x * ri).sum::<f64>() / nf + a[j] * nb[j];
                let new = soft_threshold(c, lambda) / a[j];
                let delta = new - nb[j];
                if delta != 0.0 {
                    for (ri, x) in r.iter_mut().zip(col) {
                        *ri -= delta * x;
                    }
                    nb[j] = new;
                    max_change = max_change.max(delta.abs() * a[j].sqrt());
                }
            }
            if max_change < 1e-13 || sweeps >= cfg.max_sweeps {
                break;
            }
        }
        // backtrack on the true objective
        let f_old = s.objective(*b0, b, lambda);
        let mut t = 1.0;
        loop {
            let cb0 = *b0 + t * (nb0 - *b0);
            let cb: Vec<f64> = b.iter().zip(&nb).map(|(o, v)| o + t * (v - o)).collect();
            if s.objective(cb0, &cb, lambda) <= f_old + 1e-15 * f_old.abs() || t < 1e-8 {
                *b0 = cb0;
                b.copy_from_slice(&cb);
                break;
            }
            t *= 0.5;
        }
    }
}

fn solution(s: &Standardized, names: &[String], lambda: f64, b0: f64, b: &[f64], kkt: f64, sweeps: usize) -> LassoSolution {
    let coefficients: Vec<f64> =
        b.iter().zip(&s.sds).map(|(bj, sd)| if *sd > 0.0 { bj / sd } else { 0.0 }).collect();
    let intercept = b0 - coefficients.iter().zip(&s.means).map(|(c, m)| c * m).sum::<f64>();
    let support = b.iter().zip(names).filter(|(v, _)| **v != 0.0).map(|(_, n)| n.clone()).collect();
    let deviance = -2.0 * s.loglik(&s.eta(b0, b));
    LassoSolution {
        lambda,
        intercept,
        coefficients,
        std_coefficients: b.to_vec(),
        support,
        kkt_violation: kkt,
        sweeps,
        deviance,
    }
}

/// Fits the penalized model at each `lambdas` value (descending order is
/// fastest, via warm starts), or along the default path when `None`. The
/// default path stops early once the fit nearly saturates.
pub fn lasso_logistic(
    design: &DesignMatrix,
    lambdas: Option<&[f64]>,
    cfg: &LassoConfig,
) -> Result<LassoPath, RegressionError> {
    if !design.has_both_classes() {
        return Err(RegressionError::SingleClass);
    }
    let s = Standardized::new(design);
    let n = s.n() as f64;
    let ybar = s.y.iter().sum::<f64>() / n;
    let null_deviance = -2.0 * s.loglik(&vec![crate::special::logit(ybar); s.n()]);
    let lmax = lambda_max(design);
    let default;
    let lambdas = match lambdas {
        Some(l) => l,
        None => {
            default = default_lambdas(lmax, cfg);
            &default
        }
    };
    let mut b0 = crate::special::logit(ybar);
    let mut b = vec![0.0; design.n_features()];
    let mut solutions = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let (kkt, sweeps) = solve(&s, lambda, &mut b0, &mut b, cfg)?;
        let sol = solution(&s, &design.names, lambda, b0, &b, kkt, sweeps);
        let ratio = 1.0 - sol.deviance / null_deviance;
        solutions.push(sol);
        if lambdas.len() > 1 && ratio > cfg.max_dev_ratio {
            log::debug!("lasso path saturated at lambda {lambda}");
            break;
        }
    }
    Ok(LassoPath { names: design.names.clone(), lambda_max: lmax, null_deviance, solutions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoCv {
    pub lambdas: Vec<f64>,
    pub mean_deviance: Vec<f64>,
    pub se_deviance: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_1se: f64,
    pub support_min: Vec<String>,
    pub path: LassoPath,
}

/// Stratified, seeded k-fold cross-validation of held-out deviance along
/// the full-data path.
pub fn cv_lasso(design: &DesignMatrix, folds: usize, seed: u64, cfg: &LassoConfig) -> Result<LassoCv, RegressionError> {
    let path = lasso_logistic(design, None, cfg)?;
    let lambdas: Vec<f64> = path.solutions.iter().map(|s| s.lambda).collect();
    let folds = folds.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; design.n_rows()];
    for class in [0.0, 1.0] {
        let mut idx: Vec<usize> = (0..design.n_rows()).filter(|&i| design.y[i] == class).collect();
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            fold_of[i] = k % folds;
        }
    }
    let mut per_fold: Vec<Vec<f64>> = Vec::new();
    for f in 0..folds {
        let train: Vec<usize> = (0..design.n_rows()).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..design.n_rows()).filter(|&i| fold_of[i] == f).collect();
        let tr = design.select_rows(&train);
        if !tr.has_both_classes() || test.is_empty() {
            continue;
        }
        let mut devs = Vec::new();
        let s = Standardized::new(&tr);
        let ybar = s.y.iter().sum::<f64>() / s.n() as f64;
        let mut b0 = crate::special::logit(ybar);
        let mut b = vec![0.0; tr.n_features()];
        for &lambda in &lambdas {
            if solve(&s, lambda, &mut b0, &mut b, cfg).is_err() {
                break;
            }
            let sol = solution(&s, &tr.names, lambda, b0, &b, 0.0, 0);
            let mut dev = 0.0;
            for &i in &test {
                let eta = sol.intercept
                    + design.x.row(i).iter().zip(&sol.coefficients).map(|(x, c)| x * c).sum::<f64>();
                let p = logistic(eta).clamp(1e-15, 1.0 - 1e-15);
                dev -= 2.0 * if design.y[i] == 1.0 { p.ln() } else { (1.0 - p).ln() };
            }
            devs.push(dev / test.len() as f64);
        }
        per_fold.push(devs);
    }
    let usable = per_fold.iter().map(Vec::len).min().unwrap_or(0);
    if usable == 0 {
        return Err(RegressionError::LassoNoConvergence { lambda: lambdas[0], kkt_violation: f64::NAN });
    }
    let k = per_fold.len() as f64;
    let mut mean_deviance = Vec::new();
    let mut se_deviance = Vec::new();
    for l in 0..usable {
        let vals: Vec<f64> = per_fold.iter().map(|d| d[l]).collect();
        let m = vals.iter().sum::<f64>() / k;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0);
        mean_deviance.push(m);
        se_deviance.push((var / k).sqrt());
    }
    let best = (0..usable).fold(0, |b, l| if mean_deviance[l] < mean_deviance[b] { l } else { b });
    let cutoff = mean_deviance[best] + se_deviance[best];
    let one_se = (0..=best).find(|&l| mean_deviance[l] <= cutoff).unwrap_or(best);
    Ok(LassoCv {
        lambdas: lambdas[..usable].to_vec(),
        mean_deviance,
        se_deviance,
        lambda_min: lambdas[best],
        lambda_1se: lambdas[one_se],
        support_min: path.solutions[best].support.clone(),
        path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::fit_logistic;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn design(seed: u64, n: usize, p: usize, betas: &[f64]) -> DesignMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = vec![];
        let mut y = vec![];
        for _ in 0..n {
            let row: Vec<f64> = (0..p).map(|j| 2.0 + (j as f64 + 1.0) * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
            let eta = -0.5 + betas.iter().zip(&row).map(|(b, x)| b * (x - 2.0)).sum::<f64>();
            y.push(if rng.random::<f64>() < logistic(eta) { 1.0 } else { 0.0 });
            rows.push(row);
        }
        let names = (0..p).map(|j| format!("f{j}")).collect();
        DesignMatrix::from_rows(names, &rows, y, (0..n).map(|i| i.to_string()).collect()).unwrap()
    }

    #[test]
    fn lambda_max_zeroes_everything() {
        let d = design(1, 200, 6, &[1.0, -0.5, 0.0, 0.0, 0.2, 0.0]);
        let lm = lambda_max(&d);
        let path = lasso_logistic(&d, Some(&[lm, lm * 1.5]), &LassoConfig::default()).unwrap();
        for s in &path.solutions {
            assert!(s.coefficients.iter().all(|&c| c == 0.0));
            assert!(s.kkt_violation < 1e-7);
        }
        let just_below = lasso_logistic(&d, Some(&[lm * 0.98]), &LassoConfig::default()).unwrap();
        assert_eq!(just_below.solutions[0].support.len(), 1);
    }

    #[test]
    fn tiny_lambda_matches_unpenalized_fit() {
        let d = design(2, 400, 4, &[0.8, -0.3, 0.1, 0.0]);
        let mle = fit_logistic(&d).unwrap();
        let path = lasso_logistic(&d, Some(&[1e-9]), &LassoConfig::default()).unwrap();
        let s = &path.solutions[0];
        assert!((s.intercept - mle.coefficients[0]).abs() < 1e-3);
        for j in 0..4 {
            assert!((s.coefficients[j] - mle.coefficients[j + 1]).abs() < 1e-3, "{j}");
        }
    }

    #[test]
    fn default_path_satisfies_kkt_and_moves_gradually() {
        let d = design(3, 300, 10, &[1.0, 0.0, -0.6, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0]);
        let path = lasso_logistic(&d, None, &LassoConfig::default()).unwrap();
        assert!(path.solutions.len() > 10);
        assert!(path.solutions.iter().all(|s| s.kkt_violation < 1e-7));
        assert!(path.solutions[0].support.is_empty());
        for w in path.solutions.windows(2) {
            let a: std::collections::BTreeSet<_> = w[0].support.iter().collect();
            let b: std::collections::BTreeSet<_> = w[1].support.iter().collect();
            assert!(a.symmetric_difference(&b).count() <= 3);
        }
    }

    #[test]
    fn cross_validation_keeps_strong_features() {
        let d = design(4, 300, 8, &[1.2, 0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 0.0]);
        let cv = cv_lasso(&d, 5, 17, &LassoConfig::default()).unwrap();
        assert!(cv.support_min.contains(&"f0".to_string()));
        assert!(cv.support_min.contains(&"f3".to_string()));
        assert!(cv.lambda_1se >= cv.lambda_min);
        let again = cv_lasso(&d, 5, 17, &LassoConfig::default()).unwrap();
        assert_eq!(cv, again);
    }
}
