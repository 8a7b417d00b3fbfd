//! Deterministic stand-in for a masked LM.
//!
//! Each candidate gets a weight (per occupation found in the text, falling
//! back to `*`), multiplied by `2^(noise * u)` where `u` in [-1, 1) is
//! derived from sha256 over the seed, the template text (occupation
//! blanked out) and the candidate. Weights are then normalized over the
//! candidate set. No floating-point state is carried between calls, so
//! results are bit-identical across runs and platforms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CandidateProbability, MaskedQuery, Scorer, ScorerError, VocabStatus};
use crate::text::word_spans;

/// Wildcard occupation key in [`MockConfig::weights`].
pub const ANY_OCCUPATION: &str = "*";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub seed: u64,
    /// Noise amplitude in log2 units; 0 disables noise.
    pub noise: f64,
    /// occupation (or `*`) -> candidate -> weight. Missing entries weigh 1.
    pub weights: BTreeMap<String, BTreeMap<String, f64>>,
    /// Words the mock tokenizer splits, with their pieces.
    pub multi_token: BTreeMap<String, Vec<String>>,
}

impl MockConfig {
    pub fn uniform() -> Self {
        Self::default()
    }

    /// Every occupation gets `male_weight : female_weight` on the given pair.
    pub fn biased(male: &str, female: &str, male_weight: f64, female_weight: f64) -> Self {
        let mut inner = BTreeMap::new();
        inner.insert(male.to_string(), male_weight);
        inner.insert(female.to_string(), female_weight);
        let mut weights = BTreeMap::new();
        weights.insert(ANY_OCCUPATION.to_string(), inner);
        Self {
            weights,
            ..Self::default()
        }
    }

    pub fn with_weight(mut self, occupation: &str, candidate: &str, weight: f64) -> Self {
        self.weights
            .entry(occupation.to_lowercase())
            .or_default()
            .insert(candidate.to_string(), weight);
        self
    }

    pub fn with_noise(mut self, seed: u64, noise: f64) -> Self {
        self.seed = seed;
        self.noise = noise;
        self
    }

    pub fn with_multi_token(mut self, word: &str, pieces: &[&str]) -> Self {
        self.multi_token.insert(
            word.to_string(),
            pieces.iter().map(|p| p.to_string()).collect(),
        );
        self
    }
}

#[derive(Debug, Clone)]
pub struct MockScorer {
    model_name: String,
    config: MockConfig,
}

impl MockScorer {
    pub fn new(model_name: &str, config: MockConfig) -> Self {
        Self {
            model_name: model_name.to_string(),
            config,
        }
    }

    pub fn uniform(model_name: &str) -> Self {
        Self::new(model_name, MockConfig::uniform())
    }

    /// First word of `text` that has its own weight table, plus the text
    /// with that word blanked.
    fn locate_occupation<'a>(&'a self, text: &str) -> (Option<&'a BTreeMap<String, f64>>, String) {
        for (start, end) in word_spans(text) {
            let word = text[start..end].to_lowercase();
            if word == ANY_OCCUPATION {
                continue;
            }
            if let Some(table) = self.config.weights.get(&word) {
                let mut blanked = text.to_string();
                blanked.replace_range(start..end, "[OCC]");
                return (Some(table), blanked);
            }
        }
        (None, text.to_string())
    }

    fn weight(&self, table: Option<&BTreeMap<String, f64>>, candidate: &str) -> f64 {
        table
            .and_then(|t| t.get(candidate))
            .or_else(|| {
                self.config
                    .weights
                    .get(ANY_OCCUPATION)
                    .and_then(|t| t.get(candidate))
            })
            .copied()
            .unwrap_or(1.0)
    }

    fn noise_factor(&self, template_key: &str, candidate: &str) -> f64 {
        if self.config.noise == 0.0 {
            return 1.0;
        }
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        h.update(template_key.as_bytes());
        h.update([0x1f]);
        h.update(candidate.as_bytes());
        let digest = h.finalize();
        let bits = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let unit = (bits >> 11) as f64 / (1u64 << 53) as f64;
        (self.config.noise * (2.0 * unit - 1.0)).exp2()
    }
}

impl Scorer for MockScorer {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn score(&self, query: &MaskedQuery) -> Result<Vec<CandidateProbability>, ScorerError> {
        query.validate()?;
        let (table, template_key) = self.locate_occupation(&query.text);
        let raw: Vec<Option<f64>> = query
            .candidates
            .iter()
            .map(|c| {
                if self.config.multi_token.contains_key(c) {
                    None
                } else {
                    Some(self.weight(table, c) * self.noise_factor(&template_key, c))
                }
            })
            .collect();
        let total: f64 = raw.iter().flatten().sum();
        Ok(query
            .candidates
            .iter()
            .zip(raw)
            .map(|(c, r)| match r {
                Some(w) => CandidateProbability::compatible(c.clone(), w / total),
                None => CandidateProbability::incompatible(c.clone()),
            })
            .collect())
    }

    fn vocab_check(&self, word: &str) -> Result<VocabStatus, ScorerError> {
        Ok(match self.config.multi_token.get(word) {
            Some(pieces) => VocabStatus::MultiToken(pieces.clone()),
            None => VocabStatus::SingleToken,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(text: &str, c: &[&str]) -> MaskedQuery {
        MaskedQuery::new(text, c.iter().copied()).unwrap()
    }

    #[test]
    fn uniform_pair_is_half() {
        let s = MockScorer::uniform("m");
        let r = s.score(&q("[MASK] is a nurse.", &["he", "she"])).unwrap();
        assert_eq!(r[0].probability, Some(0.5));
        assert_eq!(r[1].probability, Some(0.5));
        assert!(r.iter().all(|c| c.compatible));
    }

    #[test]
    fn per_occupation_weights_apply() {
        let cfg = MockConfig::uniform()
            .with_weight("nurse", "she", 3.0)
            .with_weight("engineer", "he", 3.0);
        let s = MockScorer::new("m", cfg);
        let nurse = s.score(&q("[MASK] is a nurse.", &["he", "she"])).unwrap();
        assert_eq!(nurse[1].probability, Some(0.75));
        let eng = s.score(&q("[MASK] is an engineer.", &["he", "she"])).unwrap();
        assert_eq!(eng[0].probability, Some(0.75));
    }

    #[test]
    fn noise_is_template_level_and_seeded() {
        let cfg = MockConfig::uniform().with_noise(7, 0.5);
        let s = MockScorer::new("m", cfg.clone());
        let a = s.score(&q("[MASK] likes it.", &["he", "she"])).unwrap();
        let b = MockScorer::new("m", cfg).score(&q("[MASK] likes it.", &["he", "she"])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].probability, Some(0.5));
        let other_seed = MockScorer::new("m", MockConfig::uniform().with_noise(8, 0.5))
            .score(&q("[MASK] likes it.", &["he", "she"]))
            .unwrap();
        assert_ne!(a, other_seed);
    }

    #[test]
    fn multi_token_words_are_incompatible() {
        let s = MockScorer::new("m", MockConfig::uniform().with_multi_token("engineer", &["engine", "er"]));
        assert!(s.vocab_check("nurse").unwrap().is_single());
        assert_eq!(
            s.vocab_check("engineer").unwrap(),
            VocabStatus::MultiToken(vec!["engine".into(), "er".into()])
        );
        let r = s.score(&q("he is a [MASK].", &["engineer", "nurse"])).unwrap();
        assert!(!r[0].compatible && r[0].probability.is_none());
        assert_eq!(r[1].probability, Some(1.0));
    }
}
