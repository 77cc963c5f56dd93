//! Special functions used by the test statistics and the Beta likelihood.
//!
//! Everything here is implemented directly so the crate carries no statistics
//! runtime: log-gamma (Lanczos), the polygamma family up to order two,
//! regularized incomplete beta and gamma functions, and the Student-t and
//! standard normal tail probabilities built on them.

use std::f64::consts::PI;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

const CF_EPS: f64 = 1e-16;
const CF_TINY: f64 = 1e-300;
const CF_MAX_ITER: usize = 100_000;

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x)
    } else if x >= 10.0 {
        // Stirling series, consistent with the digamma expansion below
        let inv = 1.0 / x;
        let inv2 = inv * inv;
        let series = inv
            * (1.0 / 12.0
                - inv2
                    * (1.0 / 360.0
                        - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0 - inv2 * 691.0 / 360_360.0)))));
        (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + series
    } else {
        let x = x - 1.0;
        let mut a = LANCZOS_COEF[0];
        let t = x + LANCZOS_G + 0.5;
        for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

/// Digamma function ψ(x) for `x > 0`.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln() - 0.5 * inv
        - inv2
            * (1.0 / 12.0
                - inv2
                    * (1.0 / 120.0
                        - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))))
}

/// Trigamma function ψ₁(x) for `x > 0`.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))))
}

/// Tetragamma function ψ₂(x) for `x > 0`.
pub fn tetragamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 2.0 / (x * x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc - inv2
        - inv2 * inv
        - inv2
            * inv2
            * (0.5 - inv2 * (1.0 / 6.0 - inv2 * (1.0 / 6.0 - inv2 * (3.0 / 10.0 - inv2 * 5.0 / 6.0))))
}

/// Regularized incomplete beta function I_x(a, b).
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    if x < (a + 1.0) / (a + b + 2.0) {
        beta_prefactor(a, b, x) * beta_cf(a, b, x) / a
    } else {
        1.0 - beta_prefactor(b, a, 1.0 - x) * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_prefactor(a: f64, b: f64, x: f64) -> f64 {
    (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp()
}

// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
            break;
        }
    }
    h
}

/// Regularized lower incomplete gamma P(a, x).
pub fn inc_gamma_lower(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_cf(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 − P(a, x).
pub fn inc_gamma_upper(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_cf(a, x)
    }
}

fn gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..CF_MAX_ITER {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * CF_EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_cf(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / CF_TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..CF_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = b + an / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x >= 0.0 {
        inc_gamma_upper(0.5, x * x)
    } else {
        1.0 + inc_gamma_lower(0.5, x * x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Two-sided standard normal tail probability P(|Z| ≥ |z|).
pub fn normal_two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Two-sided Student-t tail probability P(|T| ≥ |t|) with `df` degrees of
/// freedom (df may be fractional, as for Welch tests).
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() || df.is_nan() || df <= 0.0 {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let t2 = t * t;
    let x = df / (df + t2);
    // 1 − x formed directly so small |t| keeps full precision
    let one_minus_x = t2 / (df + t2);
    let p = if x > 0.5 {
        1.0 - inc_beta(0.5, 0.5 * df, one_minus_x)
    } else {
        inc_beta(0.5 * df, 0.5, x)
    };
    p.clamp(0.0, 1.0)
}

/// Student-t CDF P(T ≤ t).
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * student_t_two_sided_p(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Numerically stable logistic function.
pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut fact = 1.0f64;
        for n in 1..20u32 {
            assert_relative_eq!(ln_gamma(n as f64), fact.ln(), epsilon = 1e-12, max_relative = 1e-13);
            fact *= n as f64;
        }
        assert_relative_eq!(ln_gamma(0.5), PI.sqrt().ln(), epsilon = 1e-14);
    }

    #[test]
    fn polygamma_known_values() {
        let euler = 0.577_215_664_901_532_9;
        assert_relative_eq!(digamma(1.0), -euler, epsilon = 1e-13);
        assert_relative_eq!(digamma(0.5), -euler - 2.0 * 2f64.ln(), epsilon = 1e-13);
        assert_relative_eq!(trigamma(1.0), PI * PI / 6.0, epsilon = 1e-13);
        assert_relative_eq!(trigamma(0.5), PI * PI / 2.0, epsilon = 1e-13);
        // ψ₂(1) = −2ζ(3)
        assert_relative_eq!(tetragamma(1.0), -2.0 * 1.202_056_903_159_594_3, epsilon = 1e-13);
    }

    #[test]
    fn polygamma_derivative_consistency() {
        for &x in &[0.3, 1.7, 4.0, 12.5, 80.0] {
            let h = 1e-5;
            let d_psi = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            let d_tri = (trigamma(x + h) - trigamma(x - h)) / (2.0 * h);
            assert_relative_eq!(d_psi, trigamma(x), max_relative = 1e-7);
            assert_relative_eq!(d_tri, tetragamma(x), max_relative = 1e-6);
        }
    }

    #[test]
    fn incomplete_beta_symmetry_and_closed_forms() {
        // I_x(1, 1) = x; I_x(a, 1) = x^a
        for &x in &[0.1, 0.5, 0.93] {
            assert_relative_eq!(inc_beta(1.0, 1.0, x), x, epsilon = 1e-15);
            assert_relative_eq!(inc_beta(3.5, 1.0, x), x.powf(3.5), epsilon = 1e-14);
            assert_relative_eq!(
                inc_beta(2.5, 4.0, x) + inc_beta(4.0, 2.5, 1.0 - x),
                1.0,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn t_tail_with_one_df_is_cauchy() {
        for &t in &[0.01, 0.5, 1.0, 3.0, 40.0] {
            let cauchy = 1.0 - 2.0 * (t as f64).atan() / PI;
            assert_relative_eq!(student_t_two_sided_p(t, 1.0), cauchy, epsilon = 1e-14);
        }
    }

    #[test]
    fn normal_tails() {
        assert_relative_eq!(normal_two_sided_p(1.959_963_984_540_054), 0.05, epsilon = 1e-13);
        assert_relative_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(erfc(1.0), 0.157_299_207_050_285_13, epsilon = 1e-15);
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(-800.0), 0.0);
        assert_eq!(logistic(800.0), 1.0);
        assert_relative_eq!(logit(logistic(0.3)), 0.3, epsilon = 1e-15);
    }
}
