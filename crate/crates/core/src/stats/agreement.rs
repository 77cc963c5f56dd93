use std::collections::{BTreeMap, BTreeSet};

use super::StatsError;

/// |A ∩ B| / |A ∪ B|.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Result<f64, StatsError> {
    let union = a.union(b).count();
    if union == 0 {
        return Err(StatsError::EmptyUnion);
    }
    Ok(a.intersection(b).count() as f64 / union as f64)
}

/// Fraction of pairs whose two labels agree.
pub fn percent_agreement<L: PartialEq>(pairs: &[(L, L)]) -> Result<f64, StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::NoPairs);
    }
    Ok(pairs.iter().filter(|(a, b)| a == b).count() as f64 / pairs.len() as f64)
}

/// κ = (P_o − P_e) / (1 − P_e); `None` when P_e = 1.
pub fn kappa_from_rates(observed: f64, expected: f64) -> Option<f64> {
    if (1.0 - expected).abs() < 1e-15 {
        None
    } else {
        Some((observed - expected) / (1.0 - expected))
    }
}

/// Cohen's kappa for two raters. `Ok(None)` when chance agreement is total,
/// i.e. both raters used a single identical label throughout.
pub fn cohens_kappa<L: Ord + Clone>(pairs: &[(L, L)]) -> Result<Option<f64>, StatsError> {
    let po = percent_agreement(pairs)?;
    let n = pairs.len() as f64;
    let mut first: BTreeMap<&L, f64> = BTreeMap::new();
    let mut second: BTreeMap<&L, f64> = BTreeMap::new();
    for (a, b) in pairs {
        *first.entry(a).or_default() += 1.0;
        *second.entry(b).or_default() += 1.0;
    }
    let pe: f64 = first.iter().map(|(l, ca)| ca / n * second.get(l).copied().unwrap_or(0.0) / n).sum();
    Ok(kappa_from_rates(po, pe))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let a: BTreeSet<_> = ["x", "y"].into();
        let b: BTreeSet<_> = ["y", "z"].into();
        assert_abs_diff_eq!(jaccard(&a, &b).unwrap(), 1.0 / 3.0);
        assert_abs_diff_eq!(kappa_from_rates(0.8, 0.5).unwrap(), 0.6, epsilon = 1e-15);
        let same = vec![(0, 0), (1, 1), (0, 0), (1, 1)];
        assert_eq!(percent_agreement(&same).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&same).unwrap(), Some(1.0));
        let labels: BTreeSet<_> = same.iter().map(|p| p.0).collect();
        assert_eq!(jaccard(&labels, &labels).unwrap(), 1.0);
        assert!(jaccard::<u8>(&BTreeSet::new(), &BTreeSet::new()).is_err());
    }

    #[test]
    fn kappa_undefined_without_variation() {
        assert_eq!(cohens_kappa(&[("a", "a"), ("a", "a")]).unwrap(), None);
    }

    #[test]
    fn kappa_textbook_table() {
        // 2x2 table [[20, 5], [10, 15]]: P_o = 0.7, P_e = 0.5
        let mut pairs = vec![];
        pairs.extend(std::iter::repeat_n((1, 1), 20));
        pairs.extend(std::iter::repeat_n((1, 0), 5));
        pairs.extend(std::iter::repeat_n((0, 1), 10));
        pairs.extend(std::iter::repeat_n((0, 0), 15));
        assert_abs_diff_eq!(cohens_kappa(&pairs).unwrap().unwrap(), 0.4, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn bounded(pairs in proptest::collection::vec((0u8..4, 0u8..4), 1..60)) {
            let po = percent_agreement(&pairs).unwrap();
            prop_assert!((0.0..=1.0).contains(&po));
            if let Some(k) = cohens_kappa(&pairs).unwrap() {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k));
            }
        }
    }
}
