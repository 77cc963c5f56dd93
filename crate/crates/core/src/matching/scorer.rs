//! Pair scorers for match refinement.
//!
//! The HTTP adapter posts `{"treatment": {...}, "control": {...}}` as JSON
//! and expects `{"score": 1..5, "justification": "..."}` back.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::MatchFeatures;
use crate::cohort::Gender;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub treatment: MatchFeatures,
    pub control: MatchFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: i64,
    #[serde(default)]
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScorerError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("score {0} outside 1..5")]
    InvalidScore(i64),
}

pub trait MatchScorer: Sync {
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ScorerError>;
}

/// Rule-based scorer: 5 when genders agree and ages differ by at most 3
/// years, else 2.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubScorer;

impl MatchScorer for StubScorer {
    fn score(&self, r: &ScoreRequest) -> Result<ScoreResponse, ScorerError> {
        let close_age = match (r.treatment.age, r.control.age) {
            (Some(a), Some(b)) => (a - b).abs() <= 3.0,
            _ => false,
        };
        let same_gender = r.treatment.gender == r.control.gender && r.treatment.gender != Gender::Unknown;
        let score = if same_gender && close_age { 5 } else { 2 };
        Ok(ScoreResponse { score, justification: "stub rule".into() })
    }
}

/// Returns the same score for every pair.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub i64);

impl MatchScorer for ConstantScorer {
    fn score(&self, _: &ScoreRequest) -> Result<ScoreResponse, ScorerError> {
        Ok(ScoreResponse { score: self.0, justification: String::new() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpScorerConfig {
    pub endpoint: String,
    /// Sent as a bearer token when present.
    pub auth_token: Option<String>,
    pub timeout_ms: u64,
    /// Minimum spacing between requests.
    pub min_interval_ms: u64,
}

impl Default for HttpScorerConfig {
    fn default() -> Self {
        HttpScorerConfig { endpoint: String::new(), auth_token: None, timeout_ms: 30_000, min_interval_ms: 0 }
    }
}

pub struct HttpScorer {
    config: HttpScorerConfig,
    agent: ureq::Agent,
    last_call: Mutex<Option<Instant>>,
}

impl HttpScorer {
    pub fn new(config: HttpScorerConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        HttpScorer { config, agent, last_call: Mutex::new(None) }
    }

    fn throttle(&self) {
        let gap = Duration::from_millis(self.config.min_interval_ms);
        let mut last = self.last_call.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < gap {
                std::thread::sleep(gap - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

impl MatchScorer for HttpScorer {
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ScorerError> {
        self.throttle();
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.config.auth_token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(request).map_err(|e| ScorerError::Transport(e.to_string()))?;
        let body: ScoreResponse = resp.body_mut().read_json().map_err(|e| ScorerError::Transport(e.to_string()))?;
        if !(1..=5).contains(&body.score) {
            return Err(ScorerError::InvalidScore(body.score));
        }
        Ok(body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn features(id: &str, gender: Gender, age: f64) -> MatchFeatures {
        MatchFeatures { channel_id: id.into(), gender, age: Some(age), ..MatchFeatures::default() }
    }

    #[test]
    fn stub_rule() {
        let s = StubScorer;
        let req = |g, age| ScoreRequest { treatment: features("t", Gender::Female, 20.0), control: features("c", g, age) };
        assert_eq!(s.score(&req(Gender::Female, 23.0)).unwrap().score, 5);
        assert_eq!(s.score(&req(Gender::Female, 24.0)).unwrap().score, 2);
        assert_eq!(s.score(&req(Gender::Male, 20.0)).unwrap().score, 2);
    }

    /// Serves canned HTTP responses, one per connection, and returns the
    /// request bodies it saw.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = vec![];
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = line.trim().to_string();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(format!("{auth}|{}", String::from_utf8(buf).unwrap()));
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (format!("http://{addr}/score"), handle)
    }

    #[test]
    fn http_round_trip() {
        let (url, handle) = serve(vec![(200, r#"{"score": 4, "justification": "similar"}"#.into())]);
        let scorer = HttpScorer::new(HttpScorerConfig {
            endpoint: url,
            auth_token: Some("secret".into()),
            ..HttpScorerConfig::default()
        });
        let req = ScoreRequest { treatment: features("t1", Gender::Male, 30.0), control: features("c1", Gender::Male, 31.0) };
        let resp = scorer.score(&req).unwrap();
        assert_eq!(resp.score, 4);
        assert_eq!(resp.justification, "similar");
        let seen = handle.join().unwrap();
        assert!(seen[0].to_ascii_lowercase().starts_with("authorization: bearer secret|"));
        let body: ScoreRequest = serde_json::from_str(seen[0].split_once('|').unwrap().1).unwrap();
        assert_eq!(body, req);
    }

    #[test]
    fn http_errors_are_reported() {
        let (url, handle) = serve(vec![(500, "{}".into()), (200, r#"{"score": 9}"#.into())]);
        let scorer = HttpScorer::new(HttpScorerConfig { endpoint: url, ..HttpScorerConfig::default() });
        let req = ScoreRequest { treatment: features("t", Gender::Male, 30.0), control: features("c", Gender::Male, 30.0) };
        assert!(matches!(scorer.score(&req), Err(ScorerError::Transport(_))));
        assert_eq!(scorer.score(&req), Err(ScorerError::InvalidScore(9)));
        handle.join().unwrap();
    }
}
