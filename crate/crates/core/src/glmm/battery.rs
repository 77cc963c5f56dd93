use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{build_glmm_data, fit_beta_glmm, GlmmFit, GlmmSpec, TermKind};
use crate::cohort::CohortDataset;
use crate::stats::bh_fdr;
use crate::temporal::PrePostMeans;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryEntry {
    pub topic_id: u32,
    pub fit: Option<GlmmFit>,
    /// Why the topic was not fitted.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub entries: Vec<BatteryEntry>,
    pub q: f64,
}

impl Battery {
    pub fn fits(&self) -> impl Iterator<Item = &GlmmFit> {
        self.entries.iter().filter_map(|e| e.fit.as_ref())
    }
}

/// Fits every topic, then applies Benjamini–Hochberg within each term kind
/// across topics (all Group×Time contrasts form one family, all group main
/// effects another, and so on). Failed topics are recorded and leave their
/// families.
pub fn run_topic_battery(
    ds: &CohortDataset,
    topic_ids: &[u32],
    means: &[PrePostMeans],
    spec: &GlmmSpec,
    q: f64,
) -> Battery {
    let mut entries: Vec<BatteryEntry> = topic_ids
        .iter()
        .map(|&topic_id| {
            let result = build_glmm_data(ds, topic_id, means, spec.include_covariates)
                .and_then(|data| fit_beta_glmm(&data, spec));
            match result {
                Ok(fit) => BatteryEntry { topic_id, fit: Some(fit), error: None },
                Err(e) => {
                    log::warn!("topic {topic_id}: {e}");
                    BatteryEntry { topic_id, fit: None, error: Some(e.to_string()) }
                }
            }
        })
        .collect();
    adjust_families(&mut entries, q);
    Battery { entries, q }
}

pub(crate) fn adjust_families(entries: &mut [BatteryEntry], q: f64) {
    let mut families: BTreeMap<TermKind, Vec<(usize, usize)>> = BTreeMap::new();
    for (e, entry) in entries.iter().enumerate() {
        if let Some(fit) = &entry.fit {
            for (t, term) in fit.terms.iter().enumerate() {
                if term.p_value.is_finite() {
                    families.entry(term.kind).or_default().push((e, t));
                }
            }
        }
    }
    for members in families.values() {
        let p: Vec<f64> = members
            .iter()
            .map(|&(e, t)| entries[e].fit.as_ref().expect("member has fit").terms[t].p_value)
            .collect();
        let Ok((adjusted, _)) = bh_fdr(&p, q) else { continue };
        for (&(e, t), adj) in members.iter().zip(adjusted) {
            entries[e].fit.as_mut().expect("member has fit").terms[t].p_adjusted = Some(adj);
        }
    }
}
