//! Recorded scorer responses.
//!
//! A fixture is a JSON object keyed by [`MaskedQuery::key`]. Each entry
//! stores the exact query text and candidates, so editing a template
//! changes the key and replay fails with `FixtureMiss` instead of
//! returning stale numbers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{CandidateProbability, MaskedQuery, Scorer, ScorerError, VocabStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub text: String,
    pub candidates: Vec<String>,
    pub results: Vec<CandidateProbability>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub model: String,
    #[serde(default)]
    pub entries: BTreeMap<String, FixtureEntry>,
    /// word -> tokenizer pieces
    #[serde(default)]
    pub tokenizer: BTreeMap<String, Vec<String>>,
}

impl Fixture {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| ScorerError::Fixture(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| ScorerError::Fixture(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), ScorerError> {
        let mut json = serde_json::to_string_pretty(self)
            .map_err(|e| ScorerError::Fixture(e.to_string()))?;
        json.push('\n');
        fs::write(path, json).map_err(|e| ScorerError::Fixture(format!("{}: {e}", path.display())))
    }

    pub fn insert(&mut self, query: &MaskedQuery, results: Vec<CandidateProbability>) {
        self.entries.insert(
            query.key(),
            FixtureEntry {
                text: query.text.clone(),
                candidates: query.candidates.clone(),
                results,
            },
        );
    }

    pub fn lookup(&self, query: &MaskedQuery) -> Result<&[CandidateProbability], ScorerError> {
        match self.entries.get(&query.key()) {
            Some(e) if e.text == query.text && e.candidates == query.candidates => Ok(&e.results),
            _ => Err(ScorerError::FixtureMiss(query.text.clone())),
        }
    }
}

/// Replays a [`Fixture`]. Never fabricates an answer.
#[derive(Debug, Clone)]
pub struct FixtureScorer {
    fixture: Fixture,
}

impl FixtureScorer {
    pub fn new(fixture: Fixture) -> Self {
        Self { fixture }
    }
}

impl Scorer for FixtureScorer {
    fn model_name(&self) -> &str {
        &self.fixture.model
    }

    fn score(&self, query: &MaskedQuery) -> Result<Vec<CandidateProbability>, ScorerError> {
        self.fixture.lookup(query).map(<[_]>::to_vec)
    }

    fn vocab_check(&self, word: &str) -> Result<VocabStatus, ScorerError> {
        match self.fixture.tokenizer.get(word) {
            Some(p) if p.len() == 1 => Ok(VocabStatus::SingleToken),
            Some(p) => Ok(VocabStatus::MultiToken(p.clone())),
            None => Err(ScorerError::FixtureMiss(format!("tokenize {word:?}"))),
        }
    }
}

/// Passes calls through to `inner` and records every successful answer.
pub struct RecordingScorer<S> {
    inner: S,
    fixture: Mutex<Fixture>,
}

impl<S: Scorer> RecordingScorer<S> {
    pub fn new(inner: S) -> Self {
        let fixture = Fixture::new(inner.model_name());
        Self {
            inner,
            fixture: Mutex::new(fixture),
        }
    }

    pub fn into_fixture(self) -> Fixture {
        self.fixture.into_inner().expect("fixture lock")
    }
}

impl<S: Scorer> Scorer for RecordingScorer<S> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn score(&self, query: &MaskedQuery) -> Result<Vec<CandidateProbability>, ScorerError> {
        let r = self.inner.score(query)?;
        self.fixture
            .lock()
            .expect("fixture lock")
            .insert(query, r.clone());
        Ok(r)
    }

    fn vocab_check(&self, word: &str) -> Result<VocabStatus, ScorerError> {
        let status = self.inner.vocab_check(word)?;
        let pieces = match &status {
            VocabStatus::SingleToken => vec![word.to_string()],
            VocabStatus::MultiToken(p) => p.clone(),
        };
        self.fixture
            .lock()
            .expect("fixture lock")
            .tokenizer
            .insert(word.to_string(), pieces);
        Ok(status)
    }

    fn max_in_flight(&self) -> Option<usize> {
        self.inner.max_in_flight()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{MockConfig, MockScorer};

    #[test]
    fn record_then_replay_is_bit_identical() {
        let mock = MockScorer::new("m", MockConfig::uniform().with_noise(3, 1.3));
        let rec = RecordingScorer::new(mock);
        let q = MaskedQuery::new("[MASK] is a nurse.", ["he", "she"]).unwrap();
        let live = rec.score(&q).unwrap();
        rec.vocab_check("he").unwrap();
        let fixture = rec.into_fixture();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        fixture.save(&path).unwrap();
        let replay = FixtureScorer::new(Fixture::load(&path).unwrap());
        let replayed = replay.score(&q).unwrap();
        for (a, b) in live.iter().zip(&replayed) {
            assert_eq!(a.probability.unwrap().to_bits(), b.probability.unwrap().to_bits());
        }
        assert!(replay.vocab_check("he").unwrap().is_single());
    }

    #[test]
    fn unrecorded_query_misses() {
        let s = FixtureScorer::new(Fixture::new("m"));
        let q = MaskedQuery::new("[MASK] is a nurse.", ["he", "she"]).unwrap();
        assert!(matches!(s.score(&q), Err(ScorerError::FixtureMiss(_))));
        assert!(matches!(s.vocab_check("he"), Err(ScorerError::FixtureMiss(_))));
    }

    #[test]
    fn edited_text_misses() {
        let mut f = Fixture::new("m");
        let q = MaskedQuery::new("[MASK] is a nurse.", ["he", "she"]).unwrap();
        f.insert(&q, vec![]);
        let edited = MaskedQuery::new("[MASK] is a good nurse.", ["he", "she"]).unwrap();
        assert!(f.lookup(&edited).is_err());
        assert!(f.lookup(&q).is_ok());
    }
}
