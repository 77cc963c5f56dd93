use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::RegressionError;
use crate::cohort::{CohortDataset, Group};

/// Feature matrix without the intercept column, plus a 0/1 outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub row_ids: Vec<String>,
}

impl DesignMatrix {
    pub fn new(names: Vec<String>, x: DMatrix<f64>, y: Vec<f64>, row_ids: Vec<String>) -> Result<Self, RegressionError> {
        if x.ncols() != names.len() || x.nrows() != y.len() || row_ids.len() != y.len() {
            return Err(RegressionError::Shape(format!(
                "{}x{} matrix, {} names, {} outcomes, {} row ids",
                x.nrows(),
                x.ncols(),
                names.len(),
                y.len(),
                row_ids.len()
            )));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(RegressionError::Shape("duplicate column names".into()));
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(RegressionError::Shape("outcome must be 0/1".into()));
        }
        Ok(DesignMatrix { names, x, y, row_ids })
    }

    /// Builds from row-major feature vectors.
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>], y: Vec<f64>, row_ids: Vec<String>) -> Result<Self, RegressionError> {
        let p = names.len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        if flat.len() != rows.len() * p {
            return Err(RegressionError::Shape("ragged rows".into()));
        }
        Self::new(names, DMatrix::from_row_slice(rows.len(), p, &flat), y, row_ids)
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Restriction to the given feature columns, in the given order.
    pub fn select(&self, cols: &[usize]) -> DesignMatrix {
        DesignMatrix {
            names: cols.iter().map(|&c| self.names[c].clone()).collect(),
            x: self.x.select_columns(cols),
            y: self.y.clone(),
            row_ids: self.row_ids.clone(),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            names: self.names.clone(),
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            row_ids: rows.iter().map(|&r| self.row_ids[r].clone()).collect(),
        }
    }

    /// Appends columns (one `Vec` per column, aligned with rows).
    pub fn with_columns(&self, names: &[String], cols: &[Vec<f64>]) -> Result<DesignMatrix, RegressionError> {
        let mut all_names = self.names.clone();
        all_names.extend(names.iter().cloned());
        let n = self.n_rows();
        let mut x = self.x.clone().resize_horizontally(self.n_features() + cols.len(), 0.0);
        for (k, c) in cols.iter().enumerate() {
            if c.len() != n {
                return Err(RegressionError::Shape(format!("column `{}` has {} rows, expected {n}", names[k], c.len())));
            }
            for (i, v) in c.iter().enumerate() {
                x[(i, self.n_features() + k)] = *v;
            }
        }
        DesignMatrix::new(all_names, x, self.y.clone(), self.row_ids.clone())
    }

    pub fn has_both_classes(&self) -> bool {
        self.y.contains(&0.0) && self.y.contains(&1.0)
    }
}

/// Which controls are contrasted against the treatment group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSelector {
    Before,
    Matches,
    MajorLifeEvent,
    Pooled,
}

impl ControlSelector {
    pub const ALL: [ControlSelector; 4] =
        [ControlSelector::Before, ControlSelector::Matches, ControlSelector::MajorLifeEvent, ControlSelector::Pooled];

    pub fn as_str(self) -> &'static str {
        match self {
            ControlSelector::Before => "before",
            ControlSelector::Matches => "matches",
            ControlSelector::MajorLifeEvent => "major_life_event",
            ControlSelector::Pooled => "pooled",
        }
    }

    pub fn includes(self, g: Group) -> bool {
        match self {
            ControlSelector::Before => g == Group::AttemptedBefore,
            ControlSelector::Matches => g == Group::ControlMatches,
            ControlSelector::MajorLifeEvent => g == Group::ControlMajorLifeEvent,
            ControlSelector::Pooled => g != Group::AttemptedDuring,
        }
    }
}

pub fn topic_feature_name(topic_id: u32) -> String {
    format!("topic_{topic_id}")
}

/// Rows are treatment channels (outcome 1) and the selected controls
/// (outcome 0); features are pre-event topic means keyed by
/// `(channel_id, topic_id)`. Channels missing a pre-event mean for any
/// requested topic are left out. All-zero feature columns are dropped.
pub fn build_pre_event_design(
    ds: &CohortDataset,
    pre_means: &BTreeMap<(String, u32), f64>,
    topic_set: &[u32],
    selector: ControlSelector,
) -> Result<DesignMatrix, RegressionError> {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut ids = Vec::new();
    let mut n_controls = 0;
    for c in ds.channels() {
        let treated = c.group == Group::AttemptedDuring;
        if !treated && !selector.includes(c.group) {
            continue;
        }
        let feats: Option<Vec<f64>> =
            topic_set.iter().map(|&t| pre_means.get(&(c.channel_id.clone(), t)).copied()).collect();
        let Some(feats) = feats else {
            log::debug!("{} lacks pre-event means; left out of the design", c.channel_id);
            continue;
        };
        if !treated {
            n_controls += 1;
        }
        rows.push(feats);
        y.push(if treated { 1.0 } else { 0.0 });
        ids.push(c.channel_id.clone());
    }
    if n_controls == 0 {
        return Err(RegressionError::EmptyControls(selector.as_str().to_string()));
    }
    let names: Vec<String> = topic_set.iter().map(|&t| topic_feature_name(t)).collect();
    let full = DesignMatrix::from_rows(names, &rows, y, ids)?;
    let keep: Vec<usize> = (0..full.n_features()).filter(|&j| full.x.column(j).iter().any(|&v| v != 0.0)).collect();
    if keep.len() < full.n_features() {
        log::info!("dropping {} all-zero topic columns", full.n_features() - keep.len());
    }
    Ok(full.select(&keep))
}

/// Indicator columns from per-row label sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneHot {
    pub names: Vec<String>,
    /// One vector per column, aligned with the input rows.
    pub columns: Vec<Vec<f64>>,
    /// Labels seen in fewer than `min_support` rows.
    pub dropped: Vec<String>,
    /// Labels present in every row: collinear with the intercept.
    pub saturated: Vec<String>,
}

/// One 0/1 column per label, in label order. Labels observed in fewer than
/// `min_support` rows are dropped.
pub fn one_hot(labels: &[BTreeSet<String>], min_support: usize) -> OneHot {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for set in labels {
        for l in set {
            *counts.entry(l.as_str()).or_insert(0) += 1;
        }
    }
    let mut out = OneHot { names: vec![], columns: vec![], dropped: vec![], saturated: vec![] };
    for (label, count) in counts {
        if count < min_support {
            log::info!("one-hot label `{label}` seen in {count} rows; dropped");
            out.dropped.push(label.to_string());
            continue;
        }
        if count == labels.len() {
            out.saturated.push(label.to_string());
        }
        out.names.push(label.to_string());
        out.columns.push(labels.iter().map(|s| if s.contains(label) { 1.0 } else { 0.0 }).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::fixtures::{channel, topic};

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn one_hot_examples() {
        let oh = one_hot(&[set(&["A"]), set(&["A", "B"])], 1);
        assert_eq!(oh.names, vec!["A", "B"]);
        assert_eq!(oh.columns, vec![vec![1.0, 1.0], vec![0.0, 1.0]]);
        assert_eq!(oh.saturated, vec!["A"]);

        let oh = one_hot(&[set(&["A"]), set(&[]), set(&["A", "B"])], 2);
        assert_eq!(oh.names, vec!["A"]);
        assert_eq!(oh.dropped, vec!["B"]);
        assert_eq!(oh.columns, vec![vec![1.0, 0.0, 1.0]]);
        assert!(oh.saturated.is_empty());
    }

    #[test]
    fn pre_event_design_group_counts() {
        let sizes = [(Group::AttemptedDuring, 42), (Group::AttemptedBefore, 139), (Group::ControlMajorLifeEvent, 43), (Group::ControlMatches, 95)];
        let mut chans = vec![];
        let mut means = BTreeMap::new();
        for (g, n) in sizes {
            for i in 0..n {
                let id = format!("{}_{i:03}", g.as_str());
                means.insert((id.clone(), 3u32), 0.1 + (i % 7) as f64 * 0.01);
                chans.push(channel(&id, g));
            }
        }
        let ds = CohortDataset::new(chans, vec![], vec![topic(3)]).unwrap();
        let d = build_pre_event_design(&ds, &means, &[3], ControlSelector::Pooled).unwrap();
        assert_eq!(d.y.iter().filter(|&&v| v == 1.0).count(), 42);
        assert_eq!(d.y.iter().filter(|&&v| v == 0.0).count(), 277);
        let d = build_pre_event_design(&ds, &means, &[3], ControlSelector::Matches).unwrap();
        assert_eq!((d.n_rows(), d.n_features()), (137, 1));
        assert_eq!(d.names, vec!["topic_3"]);

        let only_treated = ds.retain_channels(|c| c.group == Group::AttemptedDuring);
        assert!(matches!(
            build_pre_event_design(&only_treated, &means, &[3], ControlSelector::Before),
            Err(RegressionError::EmptyControls(_))
        ));
    }
}
