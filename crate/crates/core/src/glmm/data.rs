use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{GlmmError, GlmmSpec, TermKind};
use crate::cohort::{CohortDataset, Gender, Group};
use crate::temporal::PrePostMeans;

/// Squeezes `y` from `[0, 1]` into the open interval:
/// `(y (n - 1) + 0.5) / n`.
pub fn boundary_adjust(y: f64, n: usize) -> f64 {
    let n = n.max(1) as f64;
    (y * (n - 1.0) + 0.5) / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmObservation {
    pub channel_id: String,
    pub y: f64,
    /// 0 before the event, 1 after.
    pub time: u8,
    pub group: Group,
    /// Values aligned with [`GlmmData::covariate_names`].
    pub covariates: Vec<f64>,
}

/// Observations for one topic plus covariate bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmData {
    pub topic_id: u32,
    pub observations: Vec<GlmmObservation>,
    pub covariate_names: Vec<String>,
    /// `(mean, sd)` used to standardize each covariate; `None` for
    /// indicators left on their 0/1 scale.
    pub covariate_scales: Vec<Option<(f64, f64)>>,
    pub boundary_adjusted: bool,
}

impl GlmmData {
    /// Wraps observations without covariates (simulation and tests).
    pub fn from_observations(topic_id: u32, observations: Vec<GlmmObservation>) -> Self {
        GlmmData {
            topic_id,
            observations,
            covariate_names: vec![],
            covariate_scales: vec![],
            boundary_adjusted: false,
        }
    }

    pub fn groups(&self) -> BTreeSet<Group> {
        self.observations.iter().map(|o| o.group).collect()
    }

    pub fn n_channels(&self) -> usize {
        self.observations.iter().map(|o| o.channel_id.as_str()).collect::<BTreeSet<_>>().len()
    }

    /// Fixed-effect column names, kinds and the contrast group of each,
    /// followed by the row-major design.
    pub(crate) fn design(&self, spec: &GlmmSpec) -> (Vec<(String, TermKind, Option<Group>)>, Vec<Vec<f64>>) {
        let groups: Vec<Group> =
            self.groups().into_iter().filter(|&g| g != spec.reference_group).collect();
        let mut cols = vec![("(Intercept)".to_string(), TermKind::Intercept, None), ("time".to_string(), TermKind::Time, None)];
        for &g in &groups {
            cols.push((format!("group[{g}]"), TermKind::Group, Some(g)));
        }
        for &g in &groups {
            cols.push((format!("time:group[{g}]"), TermKind::GroupTime, Some(g)));
        }
        for name in &self.covariate_names {
            cols.push((name.clone(), TermKind::Covariate, None));
        }
        let rows = self
            .observations
            .iter()
            .map(|o| {
                let t = o.time as f64;
                let mut r = vec![1.0, t];
                r.extend(groups.iter().map(|&g| if o.group == g { 1.0 } else { 0.0 }));
                r.extend(groups.iter().map(|&g| if o.group == g { t } else { 0.0 }));
                r.extend(o.covariates.iter().copied());
                r
            })
            .collect();
        (cols, rows)
    }
}

fn zscore(values: &mut [f64]) -> Option<(f64, f64)> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd <= 1e-12 {
        return None;
    }
    for v in values.iter_mut() {
        *v = (*v - mean) / sd;
    }
    Some((mean, sd))
}

/// One row per available period per channel. Covariates: standardized age
/// (missing at the mean), gender indicators against female, minority
/// indicator (missing at the observed rate), and standardized
/// `ln(1 + qualifying uploads in the period)`. Columns without variation are
/// left out. When any response is exactly 0 or 1, every response of the
/// topic is passed through [`boundary_adjust`].
pub fn build_glmm_data(
    ds: &CohortDataset,
    topic_id: u32,
    means: &[PrePostMeans],
    include_covariates: bool,
) -> Result<GlmmData, GlmmError> {
    if ds.topic_column(topic_id).is_none() {
        return Err(GlmmError::UnknownTopic(topic_id));
    }
    let mut obs = Vec::new();
    let mut counts = Vec::new();
    for m in means.iter().filter(|m| m.topic_id == topic_id) {
        let Some(c) = ds.channel(&m.channel_id) else { continue };
        for (time, mean, n) in [(0u8, m.mean_before, m.n_before), (1u8, m.mean_after, m.n_after)] {
            if let Some(y) = mean {
                obs.push(GlmmObservation { channel_id: c.channel_id.clone(), y, time, group: c.group, covariates: vec![] });
                counts.push(n);
            }
        }
    }
    let groups: BTreeSet<Group> = obs.iter().map(|o| o.group).collect();
    if groups.len() < 2 {
        return Err(GlmmError::TooFewGroups { topic_id, groups: groups.len() });
    }

    let n = obs.len();
    let boundary_adjusted = obs.iter().any(|o| o.y <= 0.0 || o.y >= 1.0);
    if boundary_adjusted {
        for o in obs.iter_mut() {
            o.y = boundary_adjust(o.y, n);
        }
    }

    let mut names = Vec::new();
    let mut scales = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    if include_covariates {
        let chan = |o: &GlmmObservation| ds.channel(&o.channel_id).expect("observation channel exists");

        let observed: Vec<f64> = obs.iter().filter_map(|o| chan(o).age.map(f64::from)).collect();
        if !observed.is_empty() {
            let fill = observed.iter().sum::<f64>() / observed.len() as f64;
            let mut age: Vec<f64> = obs.iter().map(|o| chan(o).age.map(f64::from).unwrap_or(fill)).collect();
            if let Some(s) = zscore(&mut age) {
                names.push("age".to_string());
                scales.push(Some(s));
                columns.push(age);
            }
        }

        let genders: BTreeMap<Gender, usize> = obs.iter().fold(BTreeMap::new(), |mut m, o| {
            *m.entry(chan(o).gender).or_insert(0) += 1;
            m
        });
        for (g, count) in &genders {
            if *g == Gender::Female || *count == n {
                continue;
            }
            names.push(format!("gender[{}]", g.as_str()));
            scales.push(None);
            columns.push(obs.iter().map(|o| if chan(o).gender == *g { 1.0 } else { 0.0 }).collect());
        }

        let flags: Vec<f64> = obs.iter().filter_map(|o| chan(o).minority_flag.map(|b| b as u8 as f64)).collect();
        if !flags.is_empty() {
            let rate = flags.iter().sum::<f64>() / flags.len() as f64;
            let col: Vec<f64> =
                obs.iter().map(|o| chan(o).minority_flag.map(|b| b as u8 as f64).unwrap_or(rate)).collect();
            if col.iter().any(|&v| v != col[0]) {
                names.push("minority".to_string());
                scales.push(None);
                columns.push(col);
            }
        }

        let mut activity: Vec<f64> = counts.iter().map(|&c| (c as f64).ln_1p()).collect();
        if let Some(s) = zscore(&mut activity) {
            names.push("activity".to_string());
            scales.push(Some(s));
            columns.push(activity);
        }
    }
    for (i, o) in obs.iter_mut().enumerate() {
        o.covariates = columns.iter().map(|c| c[i]).collect();
    }
    Ok(GlmmData { topic_id, observations: obs, covariate_names: names, covariate_scales: scales, boundary_adjusted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::fixtures::{channel, topic};

    #[test]
    fn boundary_examples() {
        assert!((boundary_adjust(0.0, 100) - 0.005).abs() < 1e-15);
        assert!((boundary_adjust(1.0, 100) - 0.995).abs() < 1e-15);
        assert_eq!(boundary_adjust(0.5, 37), 0.5);
        assert!((boundary_adjust(0.3, 10_000) - 0.3).abs() < 1e-4);
    }

    fn means(id: &str, before: Option<f64>, after: Option<f64>) -> PrePostMeans {
        PrePostMeans {
            channel_id: id.into(),
            topic_id: 0,
            mean_before: before,
            mean_after: after,
            n_before: 4,
            n_after: 9,
        }
    }

    #[test]
    fn rows_per_channel_and_design_width() {
        let mut chans = vec![];
        let mut ms = vec![];
        for (k, g) in Group::ALL.into_iter().enumerate() {
            for i in 0..3 {
                let id = format!("{k}{i}");
                let mut c = channel(&id, g);
                c.age = Some(20 + (i * 3 + k) as u32);
                chans.push(c);
                let after = if k == 0 && i == 0 { None } else { Some(0.3) };
                ms.push(means(&id, Some(0.2), after));
            }
        }
        let ds = CohortDataset::new(chans, vec![], vec![topic(0)]).unwrap();
        let data = build_glmm_data(&ds, 0, &ms, true).unwrap();
        assert_eq!(data.observations.len(), 23);
        assert_eq!(data.observations.iter().filter(|o| o.channel_id == "00").count(), 1);
        assert_eq!(data.observations.iter().filter(|o| o.channel_id == "11").count(), 2);
        let (cols, rows) = data.design(&GlmmSpec::default());
        let kinds: Vec<TermKind> = cols.iter().map(|c| c.1).collect();
        assert_eq!(kinds.iter().filter(|&&k| k == TermKind::Group).count(), 3);
        assert_eq!(kinds.iter().filter(|&&k| k == TermKind::GroupTime).count(), 3);
        assert!(data.covariate_names.contains(&"age".to_string()));
        assert!(data.covariate_names.contains(&"activity".to_string()));
        assert!(rows.iter().all(|r| r.len() == cols.len()));
        assert!(!data.boundary_adjusted);
    }

    #[test]
    fn exact_zero_triggers_adjustment_and_single_group_errors() {
        let chans = vec![channel("a", Group::AttemptedDuring), channel("b", Group::ControlMatches)];
        let ds = CohortDataset::new(chans, vec![], vec![topic(0)]).unwrap();
        let data = build_glmm_data(&ds, 0, &[means("a", Some(0.0), Some(0.5)), means("b", Some(0.2), None)], false).unwrap();
        assert!(data.boundary_adjusted);
        assert!((data.observations[0].y - 0.5 / 3.0).abs() < 1e-15);
        assert!(matches!(
            build_glmm_data(&ds, 0, &[means("a", Some(0.1), None)], false),
            Err(GlmmError::TooFewGroups { .. })
        ));
    }
}
