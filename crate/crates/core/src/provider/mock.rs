//! Scripted offline provider.
//!
//! A mock script is a JSONL file of rules. Each rule matches either an
//! exact request hash or a set of substring cues against the *last user
//! turn* (optionally restricted to one model key), and supplies the
//! response text. Rules are tried in file order; the first match wins, so
//! specific rules belong above catch-alls. A request no rule matches is a
//! hard error naming the request hash — fixtures fail loudly instead of
//! silently inventing data.
//!
//! Rules can declare a per-call latency, which keeps requests genuinely
//! overlapping in tests that observe concurrency or need a window to kill
//! the process mid-run. The provider records total calls and a per-model
//! high-water mark of concurrent calls for exactly those tests.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};

use super::{ChatTurn, ModelSpec, Role};

#[derive(Debug, Clone)]
pub enum MockMatcher {
    /// Exact request hash (as produced by [`super::request_hash`]).
    Hash(String),
    /// Every cue must appear as a substring of the last user turn; if a
    /// model key is given it must match too. An empty cue matches anything.
    Cues {
        model: Option<String>,
        contains: Vec<String>,
    },
}

#[derive(Debug, Clone)]
pub struct MockRule {
    pub matcher: MockMatcher,
    pub response: String,
    pub latency: Duration,
}

impl MockRule {
    pub fn hash(hash: impl Into<String>, response: impl Into<String>) -> Self {
        MockRule {
            matcher: MockMatcher::Hash(hash.into()),
            response: response.into(),
            latency: Duration::ZERO,
        }
    }

    pub fn cues(
        model: Option<&str>,
        contains: Vec<&str>,
        response: impl Into<String>,
    ) -> Self {
        MockRule {
            matcher: MockMatcher::Cues {
                model: model.map(str::to_string),
                contains: contains.into_iter().map(str::to_string).collect(),
            },
            response: response.into(),
            latency: Duration::ZERO,
        }
    }

    pub fn with_latency_ms(mut self, ms: u64) -> Self {
        self.latency = Duration::from_millis(ms);
        self
    }

    fn matches(&self, model_key: &str, last_user_turn: &str, request_hash: &str) -> bool {
        match &self.matcher {
            MockMatcher::Hash(h) => h == request_hash,
            MockMatcher::Cues { model, contains } => {
                if let Some(model) = model {
                    if model != model_key {
                        return false;
                    }
                }
                contains.iter().all(|cue| last_user_turn.contains(cue))
            }
        }
    }
}

/// On-disk rule shape (one JSON object per line).
#[derive(Deserialize)]
struct RawRule {
    #[serde(rename = "match")]
    matcher: RawMatcher,
    response: String,
    #[serde(default)]
    latency_ms: u64,
}

#[derive(Deserialize)]
struct RawMatcher {
    #[serde(default)]
    hash: Option<String>,
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    contains: Vec<String>,
}

#[derive(Debug)]
pub struct MockProvider {
    rules: Vec<MockRule>,
    calls: AtomicU64,
    /// model_key -> (current in-flight, high-water mark).
    in_flight: Mutex<HashMap<String, (usize, usize)>>,
}

impl MockProvider {
    pub fn from_rules(rules: Vec<MockRule>) -> Self {
        MockProvider {
            rules,
            calls: AtomicU64::new(0),
            in_flight: Mutex::new(HashMap::new()),
        }
    }

    /// Load a JSONL script. Blank lines and `#` comment lines are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(display.clone(), e))?;
        let mut rules = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let raw: RawRule =
                serde_json::from_str(trimmed).map_err(|e| Error::MockScript {
                    path: display.clone(),
                    line: line_no,
                    detail: e.to_string(),
                })?;
            let matcher = match (raw.matcher.hash, raw.matcher.model, raw.matcher.contains) {
                (Some(hash), None, contains) if contains.is_empty() => MockMatcher::Hash(hash),
                (Some(_), _, _) => {
                    return Err(Error::MockScript {
                        path: display,
                        line: line_no,
                        detail: "a hash rule cannot also have model/contains cues".into(),
                    })
                }
                (None, model, contains) => {
                    if model.is_none() && contains.is_empty() {
                        return Err(Error::MockScript {
                            path: display,
                            line: line_no,
                            detail: "rule needs a hash, a model, or at least one cue".into(),
                        });
                    }
                    MockMatcher::Cues { model, contains }
                }
            };
            rules.push(MockRule {
                matcher,
                response: raw.response,
                latency: Duration::from_millis(raw.latency_ms),
            });
        }
        Ok(Self::from_rules(rules))
    }

    /// Total scripted calls served (or attempted).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Highest number of concurrent calls observed for a model.
    pub fn max_in_flight_observed(&self, model_key: &str) -> usize {
        self.in_flight
            .lock()
            .expect("gauge lock poisoned")
            .get(model_key)
            .map(|(_, high)| *high)
            .unwrap_or(0)
    }

    pub async fn complete(
        &self,
        spec: &ModelSpec,
        turns: &[ChatTurn],
        request_hash: &str,
    ) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let _gauge = GaugeGuard::enter(&self.in_flight, &spec.model_key);

        let last_user = turns
            .iter()
            .rev()
            .find(|t| t.role == Role::User)
            .map(|t| t.content.as_str())
            .unwrap_or("");

        let rule = self
            .rules
            .iter()
            .find(|r| r.matches(&spec.model_key, last_user, request_hash));

        match rule {
            Some(rule) => {
                if !rule.latency.is_zero() {
                    tokio::time::sleep(rule.latency).await;
                }
                Ok(rule.response.clone())
            }
            None => {
                let excerpt: String = last_user.chars().take(80).collect();
                Err(Error::UnscriptedRequest {
                    model_key: spec.model_key.clone(),
                    request_hash: request_hash.to_string(),
                    excerpt,
                })
            }
        }
    }
}

/// RAII gauge: tracks concurrent calls per model and remembers the peak.
struct GaugeGuard<'a> {
    gauge: &'a Mutex<HashMap<String, (usize, usize)>>,
    model_key: String,
}

impl<'a> GaugeGuard<'a> {
    fn enter(gauge: &'a Mutex<HashMap<String, (usize, usize)>>, model_key: &str) -> Self {
        let mut map = gauge.lock().expect("gauge lock poisoned");
        let entry = map.entry(model_key.to_string()).or_insert((0, 0));
        entry.0 += 1;
        entry.1 = entry.1.max(entry.0);
        GaugeGuard {
            gauge,
            model_key: model_key.to_string(),
        }
    }
}

impl Drop for GaugeGuard<'_> {
    fn drop(&mut self) {
        let mut map = self.gauge.lock().expect("gauge lock poisoned");
        if let Some(entry) = map.get_mut(&self.model_key) {
            entry.0 = entry.0.saturating_sub(1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec() -> ModelSpec {
        ModelSpec::mock("alpha")
    }

    #[tokio::test]
    async fn first_matching_rule_wins() {
        let mock = MockProvider::from_rules(vec![
            MockRule::cues(None, vec!["Godfather"], "specific"),
            MockRule::cues(None, vec![""], "catch-all"),
        ]);
        let turns = vec![ChatTurn::user("Do you know the movie \"The Godfather\"?")];
        assert_eq!(mock.complete(&spec(), &turns, "h1").await.unwrap(), "specific");
        let turns = vec![ChatTurn::user("Do you know the movie \"Heat\"?")];
        assert_eq!(mock.complete(&spec(), &turns, "h2").await.unwrap(), "catch-all");
    }

    #[tokio::test]
    async fn cues_match_only_the_last_user_turn() {
        let mock = MockProvider::from_rules(vec![
            MockRule::cues(None, vec!["Godfather"], "wrong"),
            MockRule::cues(None, vec!["favorite"], "right"),
        ]);
        let turns = vec![
            ChatTurn::user("Do you know \"The Godfather\"?"),
            ChatTurn::assistant("Yes."),
            ChatTurn::user("What is your favorite scene?"),
        ];
        assert_eq!(mock.complete(&spec(), &turns, "h").await.unwrap(), "right");
    }

    #[tokio::test]
    async fn model_restriction_applies() {
        let mock = MockProvider::from_rules(vec![
            MockRule::cues(Some("beta"), vec![""], "beta only"),
            MockRule::cues(None, vec![""], "anyone"),
        ]);
        let turns = vec![ChatTurn::user("hi")];
        assert_eq!(mock.complete(&spec(), &turns, "h").await.unwrap(), "anyone");
    }

    #[tokio::test]
    async fn hash_rules_match_exactly() {
        let mock = MockProvider::from_rules(vec![MockRule::hash("abc123", "pinned")]);
        let turns = vec![ChatTurn::user("hi")];
        assert_eq!(mock.complete(&spec(), &turns, "abc123").await.unwrap(), "pinned");
        let err = mock.complete(&spec(), &turns, "zzz").await.unwrap_err();
        match err {
            Error::UnscriptedRequest { request_hash, .. } => assert_eq!(request_hash, "zzz"),
            other => panic!("unexpected: {other}"),
        }
    }

    #[tokio::test]
    async fn unscripted_error_names_the_hash() {
        let mock = MockProvider::from_rules(vec![]);
        let turns = vec![ChatTurn::user("an unexpected prompt")];
        let err = mock.complete(&spec(), &turns, "deadbeef").await.unwrap_err();
        assert!(err.to_string().contains("deadbeef"));
        assert!(err.to_string().contains("an unexpected prompt"));
    }

    #[test]
    fn script_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# fixture for the familiarity stage").unwrap();
        writeln!(
            f,
            r#"{{"match":{{"model":"alpha","contains":["Do you know"]}},"response":"Yes, I know it.","latency_ms":5}}"#
        )
        .unwrap();
        writeln!(f, r#"{{"match":{{"hash":"ff00"}},"response":"pinned"}}"#).unwrap();
        let mock = MockProvider::load(&path).unwrap();
        assert_eq!(mock.rules.len(), 2);
        assert!(matches!(mock.rules[1].matcher, MockMatcher::Hash(_)));
        assert_eq!(mock.rules[0].latency, Duration::from_millis(5));
    }

    #[test]
    fn malformed_script_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        std::fs::write(&path, "{\"match\":{},\"response\":\"x\"}\n").unwrap();
        match MockProvider::load(&path).unwrap_err() {
            Error::MockScript { line, detail, .. } => {
                assert_eq!(line, 1);
                assert!(detail.contains("hash"), "{detail}");
            }
            other => panic!("unexpected: {other}"),
        }

        std::fs::write(&path, "{\"match\":{\"hash\":\"a\",\"contains\":[\"x\"]},\"response\":\"x\"}\n").unwrap();
        assert!(MockProvider::load(&path).is_err());
    }
}
