//! Marginal log-likelihood of the Beta mixed model and its gradient.
//!
//! Parameters are packed as `[beta..., ln sigma2, ln phi]` for the mixed
//! model and `[beta..., ln phi]` when the random-effect variance is pinned at
//! zero. The Laplace gradient is analytic: the mode `b_hat` depends on the
//! parameters, and its derivative comes from implicit differentiation of
//! `h'(b_hat) = 0`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::special::{digamma, ln_gamma, logistic, tetragamma, trigamma};

/// Gauss–Hermite nodes and weights (weight function `exp(-z^2)`), via the
/// eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1);
    let mut j = DMatrix::<f64>::zeros(order, order);
    for k in 1..order {
        let off = (k as f64 / 2.0).sqrt();
        j[(k - 1, k)] = off;
        j[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

#[derive(Debug, Clone, Copy, Default)]
struct Terms {
    l: f64,
    l1: f64,
    l2: f64,
    l3: f64,
    lphi: f64,
    l1phi: f64,
    l2phi: f64,
}

struct PhiConsts {
    phi: f64,
    lg: f64,
    dg: f64,
}

impl PhiConsts {
    fn new(phi: f64) -> Self {
        PhiConsts { phi, lg: ln_gamma(phi), dg: digamma(phi) }
    }
}

/// Log-density of one observation and its derivatives in the linear
/// predictor and in `phi`. `full` adds the third-order terms.
fn terms(eta: f64, pc: &PhiConsts, lny: f64, ln1my: f64, full: bool) -> Terms {
    let phi = pc.phi;
    let mu = logistic(eta);
    let nu = logistic(-eta);
    let a = (mu * phi).max(1e-300);
    let b = (nu * phi).max(1e-300);
    let g = mu * nu;
    let (da, db) = (digamma(a), digamma(b));
    let (ta, tb) = (trigamma(a), trigamma(b));
    let l = pc.lg - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * lny + (b - 1.0) * ln1my;
    let d = (lny - ln1my) - (da - db);
    let lmu = phi * d;
    let t = ta + tb;
    let lmumu = -phi * phi * t;
    let mu2 = g * (nu - mu);
    let l1 = lmu * g;
    let l2 = lmumu * g * g + lmu * mu2;
    if !full {
        return Terms { l, l1, l2, ..Terms::default() };
    }
    let (qa, qb) = (tetragamma(a), tetragamma(b));
    let mu3 = g * (1.0 - 6.0 * g);
    let lmumumu = -phi.powi(3) * (qa - qb);
    let l3 = lmumumu * g.powi(3) + 3.0 * lmumu * g * mu2 + lmu * mu3;
    let lphi = pc.dg - mu * da - nu * db + mu * lny + nu * ln1my;
    let lmuphi = d - phi * (mu * ta - nu * tb);
    let lmumuphi = -2.0 * phi * t - phi * phi * (mu * qa + nu * qb);
    Terms { l, l1, l2, l3, lphi, l1phi: lmuphi * g, l2phi: lmumuphi * g * g + lmuphi * mu2 }
}

/// Data for the marginal likelihood, grouped by channel.
pub struct MarginalModel {
    p: usize,
    /// Row-major design, observations reordered so channels are contiguous.
    x: Vec<f64>,
    lny: Vec<f64>,
    ln1my: Vec<f64>,
    channels: Vec<Range<usize>>,
    /// Position of each input observation after reordering.
    order: Vec<usize>,
    quadrature: Option<(Vec<f64>, Vec<f64>)>,
    modes: RefCell<Vec<f64>>,
}

impl MarginalModel {
    /// `rows[i]` is the fixed-effect design row of observation `i`, with
    /// response `y[i]` in (0, 1) and cluster `cluster[i]`.
    pub fn new(rows: &[Vec<f64>], y: &[f64], cluster: &[&str], quadrature_order: usize) -> Self {
        let p = rows.first().map_or(0, |r| r.len());
        let mut first_seen: HashMap<&str, usize> = HashMap::new();
        for c in cluster {
            let n = first_seen.len();
            first_seen.entry(c).or_insert(n);
        }
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.sort_by_key(|&i| (first_seen[cluster[i]], i));
        let mut order = vec![0; rows.len()];
        for (pos, &i) in idx.iter().enumerate() {
            order[i] = pos;
        }
        let mut channels = Vec::new();
        let mut start = 0;
        for k in 1..=idx.len() {
            if k == idx.len() || cluster[idx[k]] != cluster[idx[start]] {
                channels.push(start..k);
                start = k;
            }
        }
        let quadrature = (quadrature_order > 1).then(|| gauss_hermite(quadrature_order));
        let n_channels = channels.len();
        MarginalModel {
            p,
            x: idx.iter().flat_map(|&i| rows[i].iter().copied()).collect(),
            lny: idx.iter().map(|&i| y[i].ln()).collect(),
            ln1my: idx.iter().map(|&i| (-y[i]).ln_1p()).collect(),
            channels,
            order,
            quadrature,
            modes: RefCell::new(vec![0.0; n_channels]),
        }
    }

    pub fn n_fixed(&self) -> usize {
        self.p
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    fn eta0(&self, beta: &[f64]) -> Vec<f64> {
        self.x.chunks_exact(self.p.max(1)).map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum()).collect()
    }

    /// Population-level fitted means (random effects at zero), in input order.
    pub fn fitted_means(&self, beta: &[f64]) -> Vec<f64> {
        let eta = self.eta0(beta);
        self.order.iter().map(|&pos| logistic(eta[pos])).collect()
    }

    /// Plain Beta-regression log-likelihood and gradient in `[beta, ln phi]`.
    fn fixed_only(&self, beta: &[f64], rho: f64, grad: bool) -> (f64, Vec<f64>) {
        let pc = PhiConsts::new(rho.exp());
        let eta = self.eta0(beta);
        let mut ll = 0.0;
        let mut g = vec![0.0; self.p + 1];
        for (i, &e) in eta.iter().enumerate() {
            let t = terms(e, &pc, self.lny[i], self.ln1my[i], grad);
            ll += t.l;
            if grad {
                for k in 0..self.p {
                    g[k] += t.l1 * self.x[i * self.p + k];
                }
                g[self.p] += pc.phi * t.lphi;
            }
        }
        (ll, g)
    }

    /// `(h, h', -h'')` summed over one channel at random effect `b`.
    fn channel_h(&self, r: &Range<usize>, eta: &[f64], b: f64, s: f64, pc: &PhiConsts) -> (f64, f64, f64) {
        let (mut l, mut l1, mut l2) = (0.0, 0.0, 0.0);
        for i in r.clone() {
            let t = terms(eta[i] + b, pc, self.lny[i], self.ln1my[i], false);
            l += t.l;
            l1 += t.l1;
            l2 += t.l2;
        }
        (l - b * b / (2.0 * s), l1 - b / s, -l2 + 1.0 / s)
    }

    fn mode(&self, c: usize, eta: &[f64], s: f64, pc: &PhiConsts) -> f64 {
        let r = &self.channels[c];
        let mut b = self.modes.borrow()[c];
        if !b.is_finite() || b.abs() > 50.0 * s.sqrt().max(1.0) {
            b = 0.0;
        }
        let mut cur = self.channel_h(r, eta, b, s, pc);
        for _ in 0..100 {
            let curv = if cur.2 > 0.0 { cur.2 } else { 1.0 / s + cur.2.abs() };
            let step = cur.1 / curv;
            if step.abs() <= 1e-12 * (1.0 + b.abs()) {
                break;
            }
            let mut t = 1.0;
            loop {
                let nb = b + t * step;
                let next = self.channel_h(r, eta, nb, s, pc);
                // near the mode the gain in h is below its rounding noise, so a
                // shrinking score also counts as progress
                if next.0 > cur.0 || next.1.abs() < cur.1.abs() || t < 1e-10 {
                    b = nb;
                    cur = next;
                    break;
                }
                t *= 0.5;
            }
        }
        self.modes.borrow_mut()[c] = b;
        b
    }

    /// Conditional modes of the random effects, one per channel in order of
    /// first appearance.
    pub fn random_effects(&self, theta: &[f64]) -> Vec<f64> {
        let p = self.p;
        let s = theta[p].exp();
        let pc = PhiConsts::new(theta[p + 1].exp());
        let eta = self.eta0(&theta[..p]);
        (0..self.channels.len()).map(|c| self.mode(c, &eta, s, &pc)).collect()
    }

    /// Marginal log-likelihood. `random` selects the packing described in
    /// the module docs.
    pub fn loglik(&self, theta: &[f64], random: bool) -> f64 {
        if !random {
            return self.fixed_only(&theta[..self.p], theta[self.p], false).0;
        }
        match &self.quadrature {
            None => self.laplace(theta, false).0,
            Some((z, w)) => self.aghq(theta, z, w),
        }
    }

    /// Log-likelihood and gradient. Exact for the Laplace approximation and
    /// the fixed-variance model; central differences under quadrature.
    pub fn loglik_grad(&self, theta: &[f64], random: bool) -> (f64, Vec<f64>) {
        if !random {
            return self.fixed_only(&theta[..self.p], theta[self.p], true);
        }
        if self.quadrature.is_none() {
            return self.laplace(theta, true);
        }
        let f0 = self.loglik(theta, true);
        let mut th = theta.to_vec();
        let g = (0..theta.len())
            .map(|k| {
                let h = 1e-6 * theta[k].abs().max(1.0);
                th[k] = theta[k] + h;
                let up = self.loglik(&th, true);
                th[k] = theta[k] - h;
                let down = self.loglik(&th, true);
                th[k] = theta[k];
                (up - down) / (2.0 * h)
            })
            .collect();
        (f0, g)
    }

    fn laplace(&self, theta: &[f64], grad: bool) -> (f64, Vec<f64>) {
        let p = self.p;
        let tau = theta[p];
        let s = tau.exp();
        let pc = PhiConsts::new(theta[p + 1].exp());
        let phi = pc.phi;
        let eta = self.eta0(&theta[..p]);
        let mut total = 0.0;
        let mut g = vec![0.0; p + 2];
        let mut hb_beta = vec![0.0; p];
        let mut dh_beta = vec![0.0; p];
        for c in 0..self.channels.len() {
            let b = self.mode(c, &eta, s, &pc);
            let r = &self.channels[c];
            let mut l = 0.0;
            let (mut s2, mut s3) = (0.0, 0.0);
            let (mut g_rho, mut hb_rho, mut dh_rho) = (0.0, 0.0, 0.0);
            hb_beta.iter_mut().for_each(|v| *v = 0.0);
            dh_beta.iter_mut().for_each(|v| *v = 0.0);
            for i in r.clone() {
                let t = terms(eta[i] + b, &pc, self.lny[i], self.ln1my[i], grad);
                l += t.l;
                s2 += t.l2;
                if grad {
                    s3 += t.l3;
                    let row = &self.x[i * p..(i + 1) * p];
                    for k in 0..p {
                        g[k] += t.l1 * row[k];
                        hb_beta[k] += t.l2 * row[k];
                        dh_beta[k] -= t.l3 * row[k];
                    }
                    g_rho += phi * t.lphi;
                    hb_rho += phi * t.l1phi;
                    dh_rho -= phi * t.l2phi;
                }
            }
            let h_curv = -s2 + 1.0 / s;
            total += l - b * b / (2.0 * s) - 0.5 * (s * h_curv).ln();
            if grad {
                // total derivative of -0.5 ln H through the mode
                let dh_db = -s3;
                let half_inv = 0.5 / h_curv;
                for k in 0..p {
                    g[k] -= half_inv * (dh_beta[k] + dh_db * hb_beta[k] / h_curv);
                }
                let hb_tau = b / s;
                let dh_tau = -1.0 / s;
                g[p] += b * b / (2.0 * s) - 0.5 - half_inv * (dh_tau + dh_db * hb_tau / h_curv);
                g[p + 1] += g_rho - half_inv * (dh_rho + dh_db * hb_rho / h_curv);
            }
        }
        (total, g)
    }

    fn aghq(&self, theta: &[f64], z: &[f64], w: &[f64]) -> f64 {
        let p = self.p;
        let s = theta[p].exp();
        let pc = PhiConsts::new(theta[p + 1].exp());
        let eta = self.eta0(&theta[..p]);
        let mut total = 0.0;
        for c in 0..self.channels.len() {
            let b = self.mode(c, &eta, s, &pc);
            let r = &self.channels[c];
            let h_curv = self.channel_h(r, &eta, b, s, &pc).2;
            let scale = (2.0 / h_curv).sqrt();
            let logs: Vec<f64> = z
                .iter()
                .zip(w)
                .map(|(&zk, &wk)| wk.ln() + self.channel_h(r, &eta, b + scale * zk, s, &pc).0 + zk * zk)
                .collect();
            let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logs.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse + scale.ln() - 0.5 * (2.0 * std::f64::consts::PI * s).ln();
        }
        total
    }

    /// Score for the variance at zero, `dL/d sigma2` evaluated at
    /// `sigma2 = 0` with fixed-model parameters `[beta, ln phi]`. A
    /// non-positive value means the likelihood decreases away from the
    /// boundary.
    pub fn variance_score_at_zero(&self, theta_fixed: &[f64]) -> f64 {
        let pc = PhiConsts::new(theta_fixed[self.p].exp());
        let eta = self.eta0(&theta_fixed[..self.p]);
        self.channels
            .iter()
            .map(|r| {
                let (mut l1, mut l2) = (0.0, 0.0);
                for i in r.clone() {
                    let t = terms(eta[i], &pc, self.lny[i], self.ln1my[i], false);
                    l1 += t.l1;
                    l2 += t.l2;
                }
                0.5 * (l1 * l1 + l2)
            })
            .sum()
    }
}
