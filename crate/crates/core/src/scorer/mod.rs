//! Masked-LM probability sources.
//!
//! Every backend answers the same two questions: what probability does the
//! model put on each candidate at the `[MASK]` position, and is a word a
//! single vocabulary token. Probabilities are raw full-vocabulary softmax
//! values; nothing here renormalizes over the candidate set.

mod fixture;
mod mock;
mod remote;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fixture::{Fixture, FixtureEntry, FixtureScorer, RecordingScorer};
pub use mock::{MockConfig, MockScorer};
pub use remote::{RemoteConfig, RemoteScorer, ENDPOINT_ENV};

use crate::templates::{sha256_hex, MASK};

pub const DEFAULT_CONCURRENCY: usize = 8;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("no recorded fixture for query {0:?}")]
    FixtureMiss(String),
    #[error("fixture error: {0}")]
    Fixture(String),
    #[error("backend returned {status}: {message}")]
    Backend { status: u16, message: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
}

impl ScorerError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ScorerError::BackendUnreachable(_))
    }
}

/// A sentence with one `[MASK]` and the fillers to score at that position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskedQuery {
    pub text: String,
    pub candidates: Vec<String>,
}

impl MaskedQuery {
    pub fn new(
        text: impl Into<String>,
        candidates: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, ScorerError> {
        let q = Self {
            text: text.into(),
            candidates: candidates.into_iter().map(Into::into).collect(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        let masks = self.text.matches(MASK).count();
        if masks != 1 {
            return Err(ScorerError::InvalidQuery(format!(
                "expected exactly one {MASK} in {:?}, found {masks}",
                self.text
            )));
        }
        if self.candidates.is_empty() {
            return Err(ScorerError::InvalidQuery("no candidates".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.candidates {
            if !seen.insert(c.as_str()) {
                return Err(ScorerError::InvalidQuery(format!("duplicate candidate {c:?}")));
            }
        }
        Ok(())
    }

    /// Stable key: sha256 over the text and the ordered candidates.
    pub fn key(&self) -> String {
        let mut buf = self.text.clone();
        for c in &self.candidates {
            buf.push('\u{1f}');
            buf.push_str(c);
        }
        sha256_hex(buf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateProbability {
    pub candidate: String,
    /// `None` iff the candidate is not a single vocabulary token.
    pub probability: Option<f64>,
    pub compatible: bool,
}

impl CandidateProbability {
    pub fn compatible(candidate: impl Into<String>, probability: f64) -> Self {
        Self {
            candidate: candidate.into(),
            probability: Some(probability),
            compatible: true,
        }
    }

    pub fn incompatible(candidate: impl Into<String>) -> Self {
        Self {
            candidate: candidate.into(),
            probability: None,
            compatible: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "pieces", rename_all = "snake_case")]
pub enum VocabStatus {
    SingleToken,
    MultiToken(Vec<String>),
}

impl VocabStatus {
    pub fn is_single(&self) -> bool {
        matches!(self, VocabStatus::SingleToken)
    }
}

pub trait Scorer: Send + Sync {
    fn model_name(&self) -> &str;

    /// One result per candidate, in query order.
    fn score(&self, query: &MaskedQuery) -> Result<Vec<CandidateProbability>, ScorerError>;

    fn vocab_check(&self, word: &str) -> Result<VocabStatus, ScorerError>;

    /// Upper bound on concurrent calls the backend accepts, if any.
    fn max_in_flight(&self) -> Option<usize> {
        None
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn score(&self, query: &MaskedQuery) -> Result<Vec<CandidateProbability>, ScorerError> {
        (**self).score(query)
    }
    fn vocab_check(&self, word: &str) -> Result<VocabStatus, ScorerError> {
        (**self).vocab_check(word)
    }
    fn max_in_flight(&self) -> Option<usize> {
        (**self).max_in_flight()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum BackendConfig {
    Mock(MockConfig),
    Fixture { path: PathBuf },
    Remote(RemoteConfig),
}

/// Which backend to use and for which model. Exactly one backend per
/// descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerDescriptor {
    pub model_name: String,
    #[serde(flatten)]
    pub backend: BackendConfig,
}

impl ScorerDescriptor {
    pub fn build(&self) -> Result<Box<dyn Scorer>, ScorerError> {
        Ok(match &self.backend {
            BackendConfig::Mock(cfg) => Box::new(MockScorer::new(&self.model_name, cfg.clone())),
            BackendConfig::Fixture { path } => {
                let fixture = Fixture::load(path)?;
                Box::new(FixtureScorer::new(fixture))
            }
            BackendConfig::Remote(cfg) => Box::new(RemoteScorer::new(&self.model_name, cfg.clone())),
        })
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self.backend, BackendConfig::Remote(_))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchOptions {
    pub concurrency: usize,
    /// Extra attempts after a retryable failure.
    pub retries: u32,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            concurrency: DEFAULT_CONCURRENCY,
            retries: 2,
        }
    }
}

#[derive(Debug, Error)]
#[error("query {index} failed after {attempts} attempt(s): {error}")]
pub struct QueryFailure {
    pub index: usize,
    pub attempts: u32,
    #[source]
    pub error: ScorerError,
}

pub type QueryResult = Result<Vec<CandidateProbability>, QueryFailure>;

/// Scores `queries` with bounded concurrency. Output order matches input
/// order no matter which worker finishes first.
pub fn score_batch<S: Scorer + ?Sized>(
    scorer: &S,
    queries: &[MaskedQuery],
    opts: BatchOptions,
) -> Vec<QueryResult> {
    let workers = opts
        .concurrency
        .max(1)
        .min(scorer.max_in_flight().unwrap_or(usize::MAX))
        .min(queries.len().max(1));
    let slots: Vec<Mutex<Option<QueryResult>>> = queries.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= queries.len() {
                    break;
                }
                let result = score_with_retry(scorer, &queries[i], i, opts.retries);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });

    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

fn score_with_retry<S: Scorer + ?Sized>(
    scorer: &S,
    query: &MaskedQuery,
    index: usize,
    retries: u32,
) -> QueryResult {
    let mut attempts = 0;
    loop {
        attempts += 1;
        let outcome = query.validate().and_then(|_| scorer.score(query));
        match outcome {
            Ok(r) => return Ok(r),
            Err(e) if e.is_retryable() && attempts <= retries => {
                log::warn!("query {index} attempt {attempts} failed: {e}; retrying");
            }
            Err(error) => {
                return Err(QueryFailure {
                    index,
                    attempts,
                    error,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_validation() {
        assert!(MaskedQuery::new("[MASK] is here.", ["he", "she"]).is_ok());
        assert!(MaskedQuery::new("no mask", ["he"]).is_err());
        assert!(MaskedQuery::new("[MASK] [MASK]", ["he"]).is_err());
        assert!(MaskedQuery::new("[MASK] x", Vec::<String>::new()).is_err());
        assert!(MaskedQuery::new("[MASK] x", ["he", "he"]).is_err());
    }

    #[test]
    fn key_depends_on_candidate_order() {
        let a = MaskedQuery::new("[MASK] x", ["he", "she"]).unwrap();
        let b = MaskedQuery::new("[MASK] x", ["she", "he"]).unwrap();
        assert_ne!(a.key(), b.key());
        assert_eq!(a.key(), a.clone().key());
    }

    #[test]
    fn descriptor_json_shape() {
        let d = ScorerDescriptor {
            model_name: "m".into(),
            backend: BackendConfig::Fixture {
                path: "f.json".into(),
            },
        };
        let v = serde_json::to_value(&d).unwrap();
        assert_eq!(v["backend"], "fixture");
        assert_eq!(v["path"], "f.json");
        let back: ScorerDescriptor = serde_json::from_value(v).unwrap();
        assert_eq!(back, d);
    }

    struct Flaky {
        fails_left: Mutex<u32>,
    }

    impl Scorer for Flaky {
        fn model_name(&self) -> &str {
            "flaky"
        }
        fn score(&self, q: &MaskedQuery) -> Result<Vec<CandidateProbability>, ScorerError> {
            let mut left = self.fails_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(ScorerError::BackendUnreachable("down".into()));
            }
            Ok(q.candidates
                .iter()
                .map(|c| CandidateProbability::compatible(c.clone(), 0.1))
                .collect())
        }
        fn vocab_check(&self, _: &str) -> Result<VocabStatus, ScorerError> {
            Ok(VocabStatus::SingleToken)
        }
    }

    #[test]
    fn retries_then_reports_attempts() {
        let q = vec![MaskedQuery::new("[MASK] x", ["a"]).unwrap()];
        let ok = Flaky {
            fails_left: Mutex::new(2),
        };
        assert!(score_batch(&ok, &q, BatchOptions { concurrency: 1, retries: 2 })[0].is_ok());

        let bad = Flaky {
            fails_left: Mutex::new(5),
        };
        let r = score_batch(&bad, &q, BatchOptions { concurrency: 1, retries: 2 });
        let failure = r[0].as_ref().unwrap_err();
        assert_eq!(failure.attempts, 3);
        assert_eq!(failure.index, 0);
    }

    #[test]
    fn empty_batch() {
        let s = MockScorer::uniform("m");
        assert!(score_batch(&s, &[], BatchOptions::default()).is_empty());
    }
}
