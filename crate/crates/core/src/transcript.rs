//! Transcript validity rules and sentence-preserving segmentation.
//!
//! Language detection and speaker counting happen upstream; this module only
//! applies thresholds to the resulting statistics. Tokens are
//! whitespace-delimited (see [`whitespace_tokens`]).
//!
//! The repetition and non-English thresholds each have two plausible source
//! values (0.40 vs 0.50 and 0.50 vs 0.30). The defaults are 0.40 and 0.50;
//! both are configurable.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptStats {
    pub sentence_count: u32,
    pub audio_seconds: f64,
    pub repeated_fraction: f64,
    pub non_english_fraction: f64,
    pub speaker_count: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OversizePolicy {
    Reject,
    Isolate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    pub min_sentences: u32,
    pub min_audio_seconds: f64,
    pub max_repeated_fraction: f64,
    pub max_non_english_fraction: f64,
    pub max_speakers: u32,
    pub oversize_policy: OversizePolicy,
    pub max_tokens: usize,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            min_sentences: 3,
            min_audio_seconds: 60.0,
            max_repeated_fraction: 0.40,
            max_non_english_fraction: 0.50,
            max_speakers: 2,
            oversize_policy: OversizePolicy::Reject,
            max_tokens: 80,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    ShortText,
    ShortAudio,
    Hallucination,
    NonEnglish,
    TooManySpeakers,
}

impl InvalidReason {
    pub fn as_str(self) -> &'static str {
        match self {
            InvalidReason::ShortText => "short_text",
            InvalidReason::ShortAudio => "short_audio",
            InvalidReason::Hallucination => "hallucination",
            InvalidReason::NonEnglish => "non_english",
            InvalidReason::TooManySpeakers => "too_many_speakers",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityVerdict {
    pub valid: bool,
    pub reasons: BTreeSet<InvalidReason>,
}

/// Applies every rule and lists all failures. Boundary values pass: a
/// transcript fails only when strictly below a minimum or strictly above a
/// maximum.
pub fn classify_transcript(stats: &TranscriptStats, rules: &RuleConfig) -> ValidityVerdict {
    let mut reasons = BTreeSet::new();
    if stats.sentence_count < rules.min_sentences {
        reasons.insert(InvalidReason::ShortText);
    }
    if stats.audio_seconds < rules.min_audio_seconds {
        reasons.insert(InvalidReason::ShortAudio);
    }
    if stats.repeated_fraction > rules.max_repeated_fraction {
        reasons.insert(InvalidReason::Hallucination);
    }
    if stats.non_english_fraction > rules.max_non_english_fraction {
        reasons.insert(InvalidReason::NonEnglish);
    }
    if let Some(n) = stats.speaker_count {
        if n > rules.max_speakers {
            reasons.insert(InvalidReason::TooManySpeakers);
        }
    }
    ValidityVerdict { valid: reasons.is_empty(), reasons }
}

/// Number of whitespace-delimited tokens.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub sentences: Vec<String>,
    /// Index of the first sentence in the input.
    pub first_sentence: usize,
    pub token_count: usize,
    /// Set when a single sentence exceeds the limit and was isolated.
    pub oversize: bool,
}

impl Chunk {
    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("max_tokens must be at least 1")]
    ZeroLimit,
    #[error("sentence {index} has {tokens} tokens, over the limit of {max_tokens}")]
    OversizeSentence { index: usize, tokens: usize, max_tokens: usize },
}

/// Greedy packing of whole sentences into chunks of at most `max_tokens`.
pub fn segment_text(
    sentences: &[(String, usize)],
    max_tokens: usize,
    policy: OversizePolicy,
) -> Result<Vec<Chunk>, SegmentError> {
    if max_tokens == 0 {
        return Err(SegmentError::ZeroLimit);
    }
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut current: Option<Chunk> = None;
    for (i, (text, tokens)) in sentences.iter().enumerate() {
        let tokens = *tokens;
        if tokens > max_tokens {
            if policy == OversizePolicy::Reject {
                return Err(SegmentError::OversizeSentence { index: i, tokens, max_tokens });
            }
            chunks.extend(current.take());
            chunks.push(Chunk { sentences: vec![text.clone()], first_sentence: i, token_count: tokens, oversize: true });
            continue;
        }
        match current.as_mut() {
            Some(c) if c.token_count + tokens <= max_tokens => {
                c.sentences.push(text.clone());
                c.token_count += tokens;
            }
            _ => {
                chunks.extend(current.take());
                current = Some(Chunk { sentences: vec![text.clone()], first_sentence: i, token_count: tokens, oversize: false });
            }
        }
    }
    chunks.extend(current);
    Ok(chunks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nominal() -> TranscriptStats {
        TranscriptStats {
            sentence_count: 3,
            audio_seconds: 61.0,
            repeated_fraction: 0.0,
            non_english_fraction: 0.0,
            speaker_count: None,
        }
    }

    #[test]
    fn rule_examples() {
        let rules = RuleConfig::default();
        let v = classify_transcript(&nominal(), &rules);
        assert!(v.valid && v.reasons.is_empty());

        let v = classify_transcript(&TranscriptStats { sentence_count: 2, ..nominal() }, &rules);
        assert_eq!(v.reasons.into_iter().collect::<Vec<_>>(), vec![InvalidReason::ShortText]);

        let v = classify_transcript(&TranscriptStats { repeated_fraction: 0.45, ..nominal() }, &rules);
        assert!(!v.valid);
        assert_eq!(v.reasons.into_iter().collect::<Vec<_>>(), vec![InvalidReason::Hallucination]);
    }

    #[test]
    fn all_failing_rules_are_listed() {
        let stats = TranscriptStats {
            sentence_count: 0,
            audio_seconds: 5.0,
            repeated_fraction: 0.9,
            non_english_fraction: 0.9,
            speaker_count: Some(4),
        };
        assert_eq!(classify_transcript(&stats, &RuleConfig::default()).reasons.len(), 5);
    }

    #[test]
    fn speaker_rule_skipped_when_absent() {
        let rules = RuleConfig { max_speakers: 0, ..RuleConfig::default() };
        assert!(classify_transcript(&nominal(), &rules).valid);
        let s = TranscriptStats { speaker_count: Some(1), ..nominal() };
        assert!(!classify_transcript(&s, &rules).valid);
    }

    fn sents(tokens: &[usize]) -> Vec<(String, usize)> {
        tokens.iter().enumerate().map(|(i, &t)| (format!("s{i}"), t)).collect()
    }

    fn sizes(chunks: &[Chunk]) -> Vec<usize> {
        chunks.iter().map(|c| c.token_count).collect()
    }

    #[test]
    fn segmentation_examples() {
        let c = segment_text(&sents(&[60, 50]), 80, OversizePolicy::Reject).unwrap();
        assert_eq!(sizes(&c), vec![60, 50]);
        let c = segment_text(&sents(&[30, 30, 30]), 80, OversizePolicy::Reject).unwrap();
        assert_eq!(sizes(&c), vec![60, 30]);
        let one = vec![("just one short sentence of exactly ten tokens in total".to_string(), 10)];
        let c = segment_text(&one, 80, OversizePolicy::Reject).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].text(), one[0].0);
        assert_eq!(whitespace_tokens(&one[0].0), 10);
    }

    #[test]
    fn oversize_policies() {
        let input = sents(&[10, 90, 10]);
        assert_eq!(
            segment_text(&input, 80, OversizePolicy::Reject).unwrap_err(),
            SegmentError::OversizeSentence { index: 1, tokens: 90, max_tokens: 80 }
        );
        let c = segment_text(&input, 80, OversizePolicy::Isolate).unwrap();
        assert_eq!(sizes(&c), vec![10, 90, 10]);
        assert_eq!(c.iter().map(|c| c.oversize).collect::<Vec<_>>(), vec![false, true, false]);
        assert_eq!(segment_text(&input, 0, OversizePolicy::Isolate).unwrap_err(), SegmentError::ZeroLimit);
    }

    proptest! {
        #[test]
        fn segmentation_preserves_order_and_totals(
            tokens in proptest::collection::vec(1usize..120, 0..40),
            max in 1usize..100,
        ) {
            let input = sents(&tokens);
            let chunks = segment_text(&input, max, OversizePolicy::Isolate).unwrap();
            let flat: Vec<String> = chunks.iter().flat_map(|c| c.sentences.clone()).collect();
            let expected: Vec<String> = input.iter().map(|s| s.0.clone()).collect();
            prop_assert_eq!(flat, expected);
            prop_assert_eq!(chunks.iter().map(|c| c.token_count).sum::<usize>(), tokens.iter().sum::<usize>());
            for c in &chunks {
                prop_assert!(c.token_count <= max || (c.oversize && c.sentences.len() == 1));
            }
            // greedy: the next chunk's first sentence would not have fit
            for w in chunks.windows(2) {
                if !w[0].oversize && !w[1].oversize {
                    prop_assert!(w[0].token_count + tokens[w[1].first_sentence] > max);
                }
            }
        }

        #[test]
        fn classification_is_monotone(
            sentences in 0u32..6, audio in 0.0f64..120.0,
            rep in 0.0f64..1.0, ne in 0.0f64..1.0,
            bump in 0.0f64..0.5,
        ) {
            let rules = RuleConfig::default();
            let base = TranscriptStats { sentence_count: sentences, audio_seconds: audio,
                repeated_fraction: rep, non_english_fraction: ne, speaker_count: None };
            let worse = TranscriptStats {
                sentence_count: sentences.saturating_sub(1),
                audio_seconds: audio - bump * 100.0,
                repeated_fraction: (rep + bump).min(1.0),
                non_english_fraction: (ne + bump).min(1.0),
                speaker_count: None,
            };
            let a = classify_transcript(&base, &rules);
            let b = classify_transcript(&worse, &rules);
            prop_assert!(a.valid || !b.valid);
            prop_assert!(a.reasons.is_subset(&b.reasons));
        }
    }
}
