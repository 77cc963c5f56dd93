use super::StatsError;

/// Benjamini–Hochberg step-up adjustment. Returns adjusted p-values in input
/// order and the rejection mask `adjusted <= q`.
pub fn bh_fdr(p: &[f64], q: f64) -> Result<(Vec<f64>, Vec<bool>), StatsError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(StatsError::InvalidLevel(q));
    }
    if let Some(&bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(StatsError::InvalidPValue(bad));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p[i] * m as f64 / (rank + 1) as f64).min(1.0);
        // guards against the top rank rounding to just below p
        adjusted[i] = running.max(p[i]);
    }
    let rejected = adjusted.iter().map(|&a| a <= q).collect();
    Ok((adjusted, rejected))
}
