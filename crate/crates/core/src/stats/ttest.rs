use super::{mean, sample_var, StatsError, TestKind, TestResult};
use crate::special::student_t_two_sided_p;

/// Spread this small relative to the data magnitude counts as zero, so that
/// `x` vs `x + c` is degenerate despite rounding in the differences.
const DEGENERATE_RTOL: f64 = 1e-12;

fn is_degenerate(sd: f64, values: &[f64]) -> bool {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    sd <= DEGENERATE_RTOL * scale || sd == 0.0
}

/// Paired t-test on the differences `y - x`.
pub fn paired_t(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(StatsError::TooFewObservations { needed: 2, got: n });
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - a).collect();
    let sd = sample_var(&d).sqrt();
    if is_degenerate(sd, &d) {
        return Err(StatsError::DegenerateVariance);
    }
    let t = mean(&d) / (sd / (n as f64).sqrt());
    let df = (n - 1) as f64;
    Ok(TestResult { kind: TestKind::PairedT, statistic: t, df, p_value: student_t_two_sided_p(t, df), p_adjusted: None })
}

/// Welch's unequal-variance t-test of `mean(a) - mean(b)` with
/// Welch–Satterthwaite degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(StatsError::TooFewObservations { needed: 2, got: s.len() });
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_var(a), sample_var(b));
    if is_degenerate(va.sqrt(), a) && is_degenerate(vb.sqrt(), b) {
        return Err(StatsError::DegenerateVariance);
    }
    let (sa, sb) = (va / na, vb / nb);
    let t = (mean(a) - mean(b)) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(TestResult { kind: TestKind::WelchT, statistic: t, df, p_value: student_t_two_sided_p(t, df), p_adjusted: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn paired_examples() {
        let r = paired_t(&[1.0, 2.0, 3.0], &[1.0, 3.0, 5.0]).unwrap();
        assert_abs_diff_eq!(r.statistic, 3f64.sqrt(), epsilon = 1e-12);
        assert_eq!(r.df, 2.0);
        let r = paired_t(&[0.0, 0.0], &[1.0, 3.0]).unwrap();
        assert_abs_diff_eq!(r.statistic, 2.0, epsilon = 1e-12);
        assert_eq!(r.df, 1.0);
        assert_eq!(paired_t(&[1.0, 2.0], &[1.0, 2.0]).unwrap_err(), StatsError::DegenerateVariance);
        assert_eq!(paired_t(&[1.0], &[1.0, 2.0]).unwrap_err(), StatsError::LengthMismatch(1, 2));
    }

    #[test]
    fn welch_examples() {
        let r = welch_t(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0]).unwrap();
        assert_abs_diff_eq!(r.statistic, -3f64.sqrt(), epsilon = 1e-12);
        // (5/12 + 5/3)^2 / ((5/12)^2/3 + (5/3)^2/3) = 75/17
        assert_abs_diff_eq!(r.df, 75.0 / 17.0, epsilon = 1e-12);
        let r = welch_t(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-15);
        assert_eq!(welch_t(&[1.0, 1.0], &[2.0, 2.0]).unwrap_err(), StatsError::DegenerateVariance);
    }

    #[test]
    fn welch_one_constant_sample() {
        // b has variance 1/3; df collapses to nb - 1 = 2
        let r = welch_t(&[0.0, 0.0, 0.0], &[1.0, 1.0, 2.0]).unwrap();
        let se = (1.0f64 / 3.0 / 3.0).sqrt();
        assert_abs_diff_eq!(r.statistic, -(4.0 / 3.0) / se, epsilon = 1e-12);
        assert_abs_diff_eq!(r.df, 2.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn welch_is_antisymmetric(
            a in proptest::collection::vec(-10.0f64..10.0, 2..20),
            b in proptest::collection::vec(-10.0f64..10.0, 2..20),
        ) {
            if let (Ok(x), Ok(y)) = (welch_t(&a, &b), welch_t(&b, &a)) {
                prop_assert_eq!(x.statistic, -y.statistic);
                prop_assert_eq!(x.p_value, y.p_value);
                prop_assert_eq!(x.df, y.df);
            }
        }

        #[test]
        fn paired_shift_is_degenerate(x in proptest::collection::vec(-100.0f64..100.0, 2..30), c in 0.001f64..50.0) {
            let y: Vec<f64> = x.iter().map(|v| v + c).collect();
            prop_assert_eq!(paired_t(&x, &y).unwrap_err(), StatsError::DegenerateVariance);
        }
    }
}
