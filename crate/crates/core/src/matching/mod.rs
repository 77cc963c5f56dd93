//! Control-cohort matching: propensity scores, nearest-neighbour candidates
//! on the score, and refinement by an external pair scorer.
//!
//! Matching is with replacement. After refinement at most `max_retained`
//! candidates per treatment are kept, preferring higher refinement scores and
//! then smaller propensity distance.

mod scorer;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortDataset, Gender};
use crate::linalg::mean_sd;
use crate::regression::{fit_logistic, lasso_logistic, DesignMatrix, LassoConfig, RegressionError};
use crate::stats::sample_var;

pub use scorer::{
    ConstantScorer, HttpScorer, HttpScorerConfig, MatchScorer, ScoreRequest, ScoreResponse, ScorerError, StubScorer,
};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchFeatures {
    pub channel_id: String,
    pub gender: Gender,
    pub age: Option<f64>,
    /// Upload counts per video category, when known.
    pub categories: BTreeMap<String, u32>,
    pub upload_count: u32,
    pub follower_count: Option<f64>,
    pub avg_duration: Option<f64>,
    pub avg_views: Option<f64>,
    pub avg_likes: Option<f64>,
    pub avg_comments: Option<f64>,
    /// Free-text channel summary passed to the scorer.
    pub summary: Option<String>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MatchFeatures {
    /// Channel-level features from the dataset. Categories are not part of
    /// the upload schema and are left empty.
    pub fn from_dataset(ds: &CohortDataset, channel_id: &str) -> Option<Self> {
        let c = ds.channel(channel_id)?;
        let uploads = ds.uploads_of(channel_id);
        Some(MatchFeatures {
            channel_id: channel_id.to_string(),
            gender: c.gender,
            age: c.age.map(f64::from),
            categories: BTreeMap::new(),
            upload_count: uploads.len() as u32,
            follower_count: c.follower_count.map(|v| v as f64),
            avg_duration: mean_of(uploads.iter().map(|u| Some(u.duration_s))),
            avg_views: mean_of(uploads.iter().map(|u| u.views.map(|v| v as f64))),
            avg_likes: mean_of(uploads.iter().map(|u| u.likes.map(|v| v as f64))),
            avg_comments: mean_of(uploads.iter().map(|u| u.comments.map(|v| v as f64))),
            summary: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchingError {
    #[error("treated and pool lists must both be nonempty")]
    EmptyInput,
    #[error("channel {0} appears in both the treated list and the pool")]
    Overlap(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no retained matches")]
    NoRetained,
    #[error("propensity model: {0}")]
    Model(#[from] RegressionError),
}

/// Numeric feature table over treated then pool rows. Missing values take
/// the pool median (the treated median if the pool has none); columns
/// missing everywhere are dropped.
pub fn feature_table(treated: &[MatchFeatures], pool: &[MatchFeatures]) -> (Vec<String>, Vec<Vec<f64>>) {
    let all: Vec<&MatchFeatures> = treated.iter().chain(pool).collect();
    let mut names = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for g in [Gender::Male, Gender::Other, Gender::Unknown] {
        names.push(format!("gender[{}]", g.as_str()));
        cols.push(all.iter().map(|f| (f.gender == g) as u8 as f64).collect());
    }
    type Getter = fn(&MatchFeatures) -> Option<f64>;
    let numeric: [(&str, Getter); 7] = [
        ("age", |f| f.age),
        ("upload_count", |f| Some(f.upload_count as f64)),
        ("follower_count", |f| f.follower_count),
        ("avg_duration", |f| f.avg_duration),
        ("avg_views", |f| f.avg_views),
        ("avg_likes", |f| f.avg_likes),
        ("avg_comments", |f| f.avg_comments),
    ];
    let median = |mut v: Vec<f64>| -> Option<f64> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    };
    for (name, get) in numeric {
        let fill = median(pool.iter().filter_map(get).collect())
            .or_else(|| median(treated.iter().filter_map(get).collect()));
        let Some(fill) = fill else { continue };
        names.push(name.to_string());
        cols.push(all.iter().map(|f| get(f).unwrap_or(fill)).collect());
    }
    let categories: BTreeSet<&String> = all.iter().flat_map(|f| f.categories.keys()).collect();
    for cat in categories {
        names.push(format!("category[{cat}]"));
        cols.push(all.iter().map(|f| f.categories.get(cat).copied().unwrap_or(0) as f64).collect());
    }
    let rows = (0..all.len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    (names, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Propensity {
    pub scores: BTreeMap<String, f64>,
    pub features: Vec<String>,
    /// Set when separation forced the penalized fit.
    pub penalized_fallback: bool,
}

/// Relative penalty used when the unpenalized fit separates.
const FALLBACK_LAMBDA_RATIO: f64 = 0.01;

/// Logistic regression of treatment membership on standardized features.
/// Constant columns are dropped, as are linearly dependent ones.
pub fn estimate_propensity(treated: &[MatchFeatures], pool: &[MatchFeatures]) -> Result<Propensity, MatchingError> {
    if treated.is_empty() || pool.is_empty() {
        return Err(MatchingError::EmptyInput);
    }
    let treated_ids: BTreeSet<&str> = treated.iter().map(|f| f.channel_id.as_str()).collect();
    if let Some(f) = pool.iter().find(|f| treated_ids.contains(f.channel_id.as_str())) {
        return Err(MatchingError::Overlap(f.channel_id.clone()));
    }
    let (names, rows) = feature_table(treated, pool);
    let n = rows.len();
    let mut keep_names = Vec::new();
    let mut keep_cols: Vec<Vec<f64>> = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let (m, sd) = mean_sd(col.iter().copied());
        if sd > 1e-12 * m.abs().max(1.0) {
            keep_names.push(name.clone());
            keep_cols.push(col.iter().map(|v| (v - m) / sd).collect());
        }
    }
    let std_rows: Vec<Vec<f64>> = (0..n).map(|i| keep_cols.iter().map(|c| c[i]).collect()).collect();
    let y: Vec<f64> = (0..n).map(|i| if i < treated.len() { 1.0 } else { 0.0 }).collect();
    let ids: Vec<String> = treated.iter().chain(pool).map(|f| f.channel_id.clone()).collect();
    let mut design = DesignMatrix::from_rows(keep_names, &std_rows, y, ids.clone())?;

    let mut penalized_fallback = false;
    let predictions: Vec<f64> = loop {
        match fit_logistic(&design) {
            Ok(fit) => {
                break (0..n).map(|i| fit.predict(&design.x.row(i).iter().copied().collect::<Vec<_>>())).collect();
            }
            Err(RegressionError::RankDeficient(dependent)) => {
                log::info!("propensity: dropping dependent features {dependent:?}");
                let keep: Vec<usize> =
                    (0..design.n_features()).filter(|&j| !dependent.contains(&design.names[j])).collect();
                design = design.select(&keep);
            }
            Err(RegressionError::Separation { feature }) => {
                log::warn!("propensity: separation along {feature}; using penalized fit");
                penalized_fallback = true;
                // warm-started path down to the target penalty
                let cfg = LassoConfig {
                    n_lambda: 20,
                    lambda_min_ratio: FALLBACK_LAMBDA_RATIO,
                    max_dev_ratio: f64::INFINITY,
                    max_sweeps: 1_000_000,
                    ..LassoConfig::default()
                };
                let path = lasso_logistic(&design, None, &cfg)?;
                let sol = path.solutions.last().expect("nonempty path");
                break (0..n)
                    .map(|i| {
                        let eta = sol.intercept
                            + design.x.row(i).iter().zip(&sol.coefficients).map(|(x, b)| x * b).sum::<f64>();
                        crate::special::logistic(eta)
                    })
                    .collect();
            }
            Err(e) => return Err(e.into()),
        }
    };
    Ok(Propensity {
        scores: ids.into_iter().zip(predictions).collect(),
        features: design.names.clone(),
        penalized_fallback,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub treatment_id: String,
    pub control_id: String,
    pub propensity_treatment: f64,
    pub propensity_control: f64,
    /// 1-based rank among the treatment's candidates.
    pub knn_rank: usize,
    pub refinement_score: Option<u8>,
    pub retained: bool,
}

impl MatchEntry {
    pub fn distance(&self) -> f64 {
        (self.propensity_treatment - self.propensity_control).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerCall {
    pub treatment_id: String,
    pub control_id: String,
    pub attempts: u32,
    pub score: Option<u8>,
    pub justification: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub entries: Vec<MatchEntry>,
    /// Treatments with fewer than `k` candidates in the pool.
    pub short: Vec<String>,
    /// Treatments left without a retained match.
    pub unmatched: Vec<String>,
    pub calls: Vec<ScorerCall>,
}

impl MatchSet {
    pub fn retained(&self) -> impl Iterator<Item = &MatchEntry> {
        self.entries.iter().filter(|e| e.retained)
    }
}

/// For each treatment, the `k` pool members nearest in propensity score
/// (ties to the smaller control id), optionally within a caliper.
pub fn knn_match(
    treated: &[String],
    pool: &[String],
    scores: &BTreeMap<String, f64>,
    k: usize,
    caliper: Option<f64>,
) -> Result<MatchSet, MatchingError> {
    if k == 0 {
        return Err(MatchingError::ZeroK);
    }
    if treated.is_empty() || pool.is_empty() {
        return Err(MatchingError::EmptyInput);
    }
    let score = |id: &String| scores.get(id).copied().unwrap_or(f64::NAN);
    let mut entries = Vec::new();
    let mut short = Vec::new();
    for t in treated {
        let st = score(t);
        let mut cands: Vec<(&String, f64)> = pool
            .iter()
            .map(|c| (c, (score(c) - st).abs()))
            .filter(|(_, d)| d.is_finite() && caliper.is_none_or(|cal| *d <= cal))
            .collect();
        cands.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        if cands.len() < k {
            short.push(t.clone());
        }
        for (rank, (c, _)) in cands.into_iter().take(k).enumerate() {
            entries.push(MatchEntry {
                treatment_id: t.clone(),
                control_id: c.clone(),
                propensity_treatment: st,
                propensity_control: score(c),
                knn_rank: rank + 1,
                refinement_score: None,
                retained: false,
            });
        }
    }
    let unmatched = treated.iter().filter(|t| !entries.iter().any(|e| &e.treatment_id == *t)).cloned().collect();
    Ok(MatchSet { entries, short, unmatched, calls: vec![] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub threshold: u8,
    pub max_retained: usize,
    pub max_attempts: u32,
    pub max_parallel: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { threshold: 3, max_retained: 3, max_attempts: 3, max_parallel: 1 }
    }
}

fn score_pair(scorer: &dyn MatchScorer, request: &ScoreRequest, max_attempts: u32) -> ScorerCall {
    let mut call = ScorerCall {
        treatment_id: request.treatment.channel_id.clone(),
        control_id: request.control.channel_id.clone(),
        attempts: 0,
        score: None,
        justification: None,
        error: None,
    };
    while call.attempts < max_attempts.max(1) {
        call.attempts += 1;
        match scorer.score(request) {
            Ok(r) if (1..=5).contains(&r.score) => {
                call.score = Some(r.score as u8);
                call.justification = Some(r.justification);
                call.error = None;
                break;
            }
            Ok(r) => call.error = Some(ScorerError::InvalidScore(r.score).to_string()),
            Err(e) => call.error = Some(e.to_string()),
        }
    }
    call
}

/// Scores every candidate pair and applies the retention rule. Pairs whose
/// scorer calls all fail stay unscored and are not retained.
pub fn refine_matches(
    candidates: &MatchSet,
    features: &BTreeMap<String, MatchFeatures>,
    scorer: &dyn MatchScorer,
    cfg: &RefineConfig,
) -> MatchSet {
    let lookup = |id: &str| {
        features.get(id).cloned().unwrap_or_else(|| MatchFeatures { channel_id: id.to_string(), ..MatchFeatures::default() })
    };
    let requests: Vec<ScoreRequest> = candidates
        .entries
        .iter()
        .map(|e| ScoreRequest { treatment: lookup(&e.treatment_id), control: lookup(&e.control_id) })
        .collect();
    let parallel = cfg.max_parallel.max(1);
    let mut calls = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(parallel) {
        if parallel == 1 {
            calls.push(score_pair(scorer, &chunk[0], cfg.max_attempts));
            continue;
        }
        let results: Vec<ScorerCall> = std::thread::scope(|s| {
            let handles: Vec<_> =
                chunk.iter().map(|r| s.spawn(move || score_pair(scorer, r, cfg.max_attempts))).collect();
            handles.into_iter().map(|h| h.join().expect("scorer thread panicked")).collect()
        });
        calls.extend(results);
    }
    let mut out = candidates.clone();
    for (e, call) in out.entries.iter_mut().zip(&calls) {
        e.refinement_score = call.score;
    }
    out.calls = calls;
    apply_retention(&mut out, cfg.threshold, cfg.max_retained);
    out
}

/// Recomputes `retained` and `unmatched` from the recorded scores.
pub fn apply_retention(set: &mut MatchSet, threshold: u8, max_retained: usize) {
    let mut by_treatment: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in set.entries.iter_mut().enumerate() {
        e.retained = false;
        by_treatment.entry(e.treatment_id.clone()).or_default().push(i);
    }
    let mut unmatched: BTreeSet<String> = set.unmatched.iter().cloned().collect();
    for (t, mut idx) in by_treatment {
        idx.retain(|&i| set.entries[i].refinement_score.is_some_and(|s| s >= threshold));
        idx.sort_by(|&a, &b| {
            let (ea, eb) = (&set.entries[a], &set.entries[b]);
            eb.refinement_score
                .cmp(&ea.refinement_score)
                .then(ea.distance().total_cmp(&eb.distance()))
                .then(ea.control_id.cmp(&eb.control_id))
        });
        if idx.is_empty() {
            unmatched.insert(t);
        } else {
            unmatched.remove(&t);
        }
        for &i in idx.iter().take(max_retained) {
            set.entries[i].retained = true;
        }
    }
    set.unmatched = unmatched.into_iter().collect();
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub feature: String,
    pub smd_before: Option<f64>,
    pub smd_after: Option<f64>,
}

fn smd(t: &[f64], c: &[f64]) -> Option<f64> {
    if t.len() < 2 || c.len() < 2 {
        return None;
    }
    let mt = t.iter().sum::<f64>() / t.len() as f64;
    let mc = c.iter().sum::<f64>() / c.len() as f64;
    let pooled = ((sample_var(t) + sample_var(c)) / 2.0).sqrt();
    (pooled > 1e-12 * mt.abs().max(mc.abs()).max(1e-300)).then(|| (mt - mc) / pooled)
}

/// Standardized mean differences per feature, before matching (all treated
/// vs the whole pool) and after (treatments with a retained match vs the
/// retained controls, counted once per match).
pub fn balance_report(
    treated: &[MatchFeatures],
    pool: &[MatchFeatures],
    set: &MatchSet,
) -> Result<Vec<BalanceRow>, MatchingError> {
    if set.retained().next().is_none() {
        return Err(MatchingError::NoRetained);
    }
    let (names, rows) = feature_table(treated, pool);
    let index: BTreeMap<&str, usize> =
        treated.iter().chain(pool).enumerate().map(|(i, f)| (f.channel_id.as_str(), i)).collect();
    let matched_t: BTreeSet<&str> = set.retained().map(|e| e.treatment_id.as_str()).collect();
    let nt = treated.len();
    Ok(names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let col = |i: usize| rows[i][j];
            let t_all: Vec<f64> = (0..nt).map(col).collect();
            let c_all: Vec<f64> = (nt..rows.len()).map(col).collect();
            let t_after: Vec<f64> = matched_t.iter().filter_map(|id| index.get(id)).map(|&i| col(i)).collect();
            let c_after: Vec<f64> =
                set.retained().filter_map(|e| index.get(e.control_id.as_str())).map(|&i| col(i)).collect();
            BalanceRow { feature: name.clone(), smd_before: smd(&t_all, &c_all), smd_after: smd(&t_after, &c_after) }
        })
        .collect())
}
