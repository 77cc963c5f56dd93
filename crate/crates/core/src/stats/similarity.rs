use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::StatsError;

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, StatsError> {
    if u.len() != v.len() {
        return Err(StatsError::LengthMismatch(u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(StatsError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Lowercased whitespace tokens with surrounding punctuation stripped.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
}

/// Per-topic tf-idf word scores, treating each topic's segments as one
/// document. tf is the raw term count, idf = ln(N / df) with N the number of
/// topics. Scores are sorted descending, ties by word.
pub fn tfidf(
    corpus: &BTreeMap<u32, Vec<String>>,
    stop_words: &HashSet<String>,
) -> BTreeMap<u32, Vec<(String, f64)>> {
    let n_topics = corpus.len() as f64;
    let counts: BTreeMap<u32, BTreeMap<String, usize>> = corpus
        .iter()
        .map(|(&topic, segments)| {
            let mut c = BTreeMap::new();
            for word in segments.iter().flat_map(|s| tokenize(s)) {
                if !stop_words.contains(&word) {
                    *c.entry(word).or_insert(0) += 1;
                }
            }
            (topic, c)
        })
        .collect();
    let mut doc_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for c in counts.values() {
        let words: BTreeSet<&str> = c.keys().map(String::as_str).collect();
        for w in words {
            *doc_freq.entry(w).or_insert(0) += 1;
        }
    }
    counts
        .iter()
        .map(|(&topic, c)| {
            let mut scored: Vec<(String, f64)> = c
                .iter()
                .map(|(w, &tf)| (w.clone(), tf as f64 * (n_topics / doc_freq[w.as_str()] as f64).ln()))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            (topic, scored)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), 0.5f64.sqrt(), epsilon = 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap_err(), StatsError::ZeroVector);
    }

    #[test]
    fn tfidf_examples() {
        let mut corpus = BTreeMap::new();
        for t in 0..10u32 {
            corpus.insert(t, vec![format!("common filler{t}")]);
        }
        corpus.insert(0, vec!["common rare rare".into(), "Rare.".into()]);
        corpus.insert(9, vec![]);
        let out = tfidf(&corpus, &HashSet::new());
        let t0 = &out[&0];
        assert_eq!(t0[0].0, "rare");
        assert_abs_diff_eq!(t0[0].1, 3.0 * 10f64.ln(), epsilon = 1e-12);
        // "common" appears in 9 of 10 topics here
        assert_abs_diff_eq!(t0.iter().find(|w| w.0 == "common").unwrap().1, (10.0f64 / 9.0).ln(), epsilon = 1e-12);
        assert!(out[&9].is_empty());

        let mut everywhere = BTreeMap::new();
        everywhere.insert(1, vec!["same".to_string()]);
        everywhere.insert(2, vec!["same".to_string()]);
        assert_eq!(tfidf(&everywhere, &HashSet::new())[&1], vec![("same".to_string(), 0.0)]);
        let stop: HashSet<String> = ["same".to_string()].into();
        assert!(tfidf(&everywhere, &stop)[&1].is_empty());
    }
}
