use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::data::GlmmData;
use super::laplace::MarginalModel;
use super::{odds_ratio, GlmmError, GlmmSpec, TermKind};
use crate::cohort::Group;
use crate::linalg::dependent_columns;
use crate::special::normal_two_sided_p;

const START_SIGMA2: f64 = 0.1;
const START_PHI: f64 = 10.0;
/// Variance estimates below this are reported as the boundary fit.
const BOUNDARY_SIGMA2: f64 = 1e-8;
const LN_SIGMA2_RANGE: (f64, f64) = (-25.0, 8.0);
const LN_PHI_RANGE: (f64, f64) = (-8.0, 15.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmTerm {
    pub name: String,
    pub kind: TermKind,
    pub group: Option<Group>,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    /// Filled in by the topic battery.
    pub p_adjusted: Option<f64>,
    pub odds_ratio: f64,
    /// Per-unit coefficient for standardized covariates.
    pub estimate_original: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmFit {
    pub topic_id: u32,
    pub reference_group: Group,
    pub terms: Vec<GlmmTerm>,
    pub sigma2: f64,
    pub phi: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    /// The random-effect variance sits at zero.
    pub boundary: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub n_obs: usize,
    pub n_channels: usize,
    pub quadrature_order: usize,
    /// Population-level fitted means in observation order.
    #[serde(skip)]
    pub fitted_means: Vec<f64>,
}

impl GlmmFit {
    pub fn term(&self, name: &str) -> Option<&GlmmTerm> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn group_time(&self, group: Group) -> Option<&GlmmTerm> {
        self.terms.iter().find(|t| t.kind == TermKind::GroupTime && t.group == Some(group))
    }
}

struct Optimum {
    theta: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
    iterations: usize,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn clamp(theta: &mut [f64], bounds: &[(usize, (f64, f64))]) {
    for &(k, (lo, hi)) in bounds {
        theta[k] = theta[k].clamp(lo, hi);
    }
}

/// Backtracking step along `d` for maximization; `None` when no ascent is
/// found.
fn line_search(
    f: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    x: &[f64],
    fx: f64,
    g: &[f64],
    d: &[f64],
    bounds: &[(usize, (f64, f64))],
) -> Option<(Vec<f64>, f64, Vec<f64>)> {
    let mut t = 1.0;
    for _ in 0..60 {
        let mut xn: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
        clamp(&mut xn, bounds);
        let slope: f64 = g.iter().zip(xn.iter().zip(x)).map(|(g, (a, b))| g * (a - b)).sum();
        let (fv, gv) = f(&xn);
        if fv.is_finite() && gv.iter().all(|v| v.is_finite()) && fv >= fx + 1e-4 * slope && slope >= 0.0 {
            if xn == x {
                return None;
            }
            return Some((xn, fv, gv));
        }
        t *= 0.5;
    }
    None
}

/// Step for the Newton polish. Near the optimum the gain is below the
/// rounding noise of the objective, so a step is accepted when it shrinks
/// the gradient without losing more than that noise.
fn polish_step(
    f: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    x: &[f64],
    fx: f64,
    g: &[f64],
    d: &[f64],
    bounds: &[(usize, (f64, f64))],
) -> Option<(Vec<f64>, f64, Vec<f64>)> {
    let noise = 1e-12 * fx.abs().max(1.0);
    let gnorm = inf_norm(g);
    let mut t = 1.0;
    for _ in 0..30 {
        let mut xn: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
        clamp(&mut xn, bounds);
        if xn == x {
            return None;
        }
        let (fv, gv) = f(&xn);
        if fv.is_finite() && gv.iter().all(|v| v.is_finite()) && fv >= fx - noise && inf_norm(&gv) < gnorm {
            return Some((xn, fv, gv));
        }
        t *= 0.5;
    }
    None
}

/// Negative Hessian of the objective by central differences of the gradient.
fn neg_hessian(f: &dyn Fn(&[f64]) -> (f64, Vec<f64>), x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        let step = 1e-5 * x[i].abs().max(1.0);
        xp[i] = x[i] + step;
        let up = f(&xp).1;
        xp[i] = x[i] - step;
        let down = f(&xp).1;
        xp[i] = x[i];
        for j in 0..n {
            h[(i, j)] = -(up[j] - down[j]) / (2.0 * step);
        }
    }
    (&h + h.transpose()) * 0.5
}

fn newton_direction(neg_h: &DMatrix<f64>, g: &[f64]) -> Vec<f64> {
    let g = DVector::from_column_slice(g);
    let scale = neg_h.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut ridge = 0.0;
    loop {
        let a = neg_h + DMatrix::identity(g.len(), g.len()) * ridge;
        if let Some(ch) = a.cholesky() {
            return ch.solve(&g).iter().copied().collect();
        }
        ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 10.0 };
    }
}

/// BFGS ascent followed by Newton polishing on a finite-difference Hessian.
fn maximize(
    f: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    start: Vec<f64>,
    bounds: &[(usize, (f64, f64))],
    tol: f64,
    max_iter: usize,
) -> Optimum {
    let n = start.len();
    let mut x = start;
    let (mut fx, mut g) = f(&x);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut iterations = 0;
    while iterations < max_iter && inf_norm(&g) > 1e-2 * tol {
        iterations += 1;
        let gv = DVector::from_column_slice(&g);
        let mut d: Vec<f64> = (&hinv * &gv).iter().copied().collect();
        if d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() <= 0.0 {
            hinv = DMatrix::identity(n, n);
            d = g.clone();
        }
        let Some((xn, fnew, gn)) = line_search(f, &x, fx, &g, &d, bounds) else { break };
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        // ascent on f is descent on -f: y = -(gn - g)
        let y = DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| b - a));
        let sy = s.dot(&y);
        if sy > 1e-14 {
            if !scaled {
                hinv = DMatrix::identity(n, n) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            hinv = &left * &hinv * &right + &s * s.transpose() * rho;
        }
        x = xn;
        fx = fnew;
        g = gn;
    }
    for _ in 0..20 {
        if inf_norm(&g) <= 1e-3 * tol {
            break;
        }
        iterations += 1;
        let d = newton_direction(&neg_hessian(f, &x), &g);
        let Some((xn, fnew, gn)) = polish_step(f, &x, fx, &g, &d, bounds) else { break };
        let moved = inf_norm(&xn.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
        x = xn;
        fx = fnew;
        g = gn;
        if moved < 1e-12 {
            break;
        }
    }
    Optimum { theta: x, value: fx, grad: g, iterations }
}

/// Fits the mixed model to one topic.
///
/// The variance-free model is fitted first, from `beta = 0` and
/// `phi = 10`. If the variance score at zero is positive, the mixed model is
/// fitted from that solution with `sigma2 = 0.1`. Estimates below `1e-8`, or
/// mixed fits that do not improve on the boundary likelihood, are reported as
/// the boundary fit with `sigma2 = 0`.
pub fn fit_beta_glmm(data: &GlmmData, spec: &GlmmSpec) -> Result<GlmmFit, GlmmError> {
    if let Some(o) = data.observations.iter().find(|o| !(o.y > 0.0 && o.y < 1.0)) {
        return Err(GlmmError::ResponseOutOfRange(o.y));
    }
    let groups = data.groups();
    if groups.len() < 2 {
        return Err(GlmmError::TooFewGroups { topic_id: data.topic_id, groups: groups.len() });
    }
    if !groups.contains(&spec.reference_group) {
        return Err(GlmmError::MissingReference(spec.reference_group));
    }
    for &g in &groups {
        let n = data
            .observations
            .iter()
            .filter(|o| o.group == g)
            .map(|o| o.channel_id.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        if n < 2 {
            return Err(GlmmError::TooFewChannels(g));
        }
    }
    let (cols, rows) = data.design(spec);
    let p = cols.len();
    let xm = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let dependent = dependent_columns(&xm, 1e-9);
    if !dependent.is_empty() {
        return Err(GlmmError::RankDeficient(dependent.iter().map(|&j| cols[j].0.clone()).collect()));
    }

    let y: Vec<f64> = data.observations.iter().map(|o| o.y).collect();
    let ids: Vec<&str> = data.observations.iter().map(|o| o.channel_id.as_str()).collect();
    let model = MarginalModel::new(&rows, &y, &ids, spec.quadrature_order.max(1));

    let fixed_f = |t: &[f64]| model.loglik_grad(t, false);
    let mut start = vec![0.0; p + 1];
    start[p] = START_PHI.ln();
    let fixed_bounds = [(p, LN_PHI_RANGE)];
    let fixed = maximize(&fixed_f, start, &fixed_bounds, spec.grad_tol, spec.max_iter);

    let mut chosen: Option<(Optimum, bool)> = None;
    if model.variance_score_at_zero(&fixed.theta) > 0.0 {
        let mixed_f = |t: &[f64]| model.loglik_grad(t, true);
        let mut start = fixed.theta[..p].to_vec();
        start.push(START_SIGMA2.ln());
        start.push(fixed.theta[p]);
        let bounds = [(p, LN_SIGMA2_RANGE), (p + 1, LN_PHI_RANGE)];
        let mixed = maximize(&mixed_f, start, &bounds, spec.grad_tol, spec.max_iter);
        if mixed.theta[p].exp() >= BOUNDARY_SIGMA2 && mixed.value >= fixed.value - 1e-9 {
            chosen = Some((mixed, true));
        }
    }
    let (opt, random) = chosen.unwrap_or((fixed, false));

    let grad_norm = inf_norm(&opt.grad);
    let converged = grad_norm <= spec.grad_tol;
    if !converged {
        log::warn!("topic {}: optimizer stopped with gradient norm {grad_norm:e}", data.topic_id);
    }
    let f = |t: &[f64]| model.loglik_grad(t, random);
    let cov = neg_hessian(&f, &opt.theta).try_inverse();
    if cov.is_none() {
        log::warn!("topic {}: singular information matrix, standard errors unavailable", data.topic_id);
    }

    let mut cov_index = 0;
    let terms = cols
        .iter()
        .enumerate()
        .map(|(k, (name, kind, group))| {
            let estimate = opt.theta[k];
            let var = cov.as_ref().map_or(f64::NAN, |c| c[(k, k)]);
            let std_error = if var > 0.0 { var.sqrt() } else { f64::NAN };
            let z = estimate / std_error;
            let estimate_original = if *kind == TermKind::Covariate {
                let scale = data.covariate_scales[cov_index];
                cov_index += 1;
                scale.map(|(_, sd)| estimate / sd)
            } else {
                None
            };
            GlmmTerm {
                name: name.clone(),
                kind: *kind,
                group: *group,
                estimate,
                std_error,
                z,
                p_value: if z.is_finite() { normal_two_sided_p(z) } else { f64::NAN },
                p_adjusted: None,
                odds_ratio: odds_ratio(estimate),
                estimate_original,
            }
        })
        .collect();

    let (sigma2, phi) = if random { (opt.theta[p].exp(), opt.theta[p + 1].exp()) } else { (0.0, opt.theta[p].exp()) };
    Ok(GlmmFit {
        topic_id: data.topic_id,
        reference_group: spec.reference_group,
        terms,
        sigma2,
        phi,
        log_likelihood: opt.value,
        converged,
        boundary: !random,
        iterations: opt.iterations,
        grad_norm,
        n_obs: y.len(),
        n_channels: model.n_channels(),
        quadrature_order: spec.quadrature_order.max(1),
        fitted_means: model.fitted_means(&opt.theta[..p]),
    })
}
