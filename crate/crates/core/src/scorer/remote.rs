//! HTTP client for the scoring service.
//!
//! Wire format (JSON over plain HTTP):
//!
//! ```text
//! POST {endpoint}/v1/score
//!   {"model": "...", "text": "... [MASK] ...", "candidates": ["he", "she"]}
//! -> {"results": [{"candidate": "he", "probability": 0.41, "compatible": true, "token_id": 2002}, ...],
//!     "model_mask_token": "[MASK]", "normalized": true}
//!
//! GET {endpoint}/v1/tokenize?model=...&word=...
//! -> {"pieces": ["engine", "er"]}
//! ```

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CandidateProbability, MaskedQuery, Scorer, ScorerError, VocabStatus, DEFAULT_CONCURRENCY};

pub const ENDPOINT_ENV: &str = "BIASAUDIT_SCORER_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL. Falls back to `BIASAUDIT_SCORER_URL` when unset.
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_secs: 60,
            max_in_flight: DEFAULT_CONCURRENCY,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ScoreRequest<'a> {
    pub model: &'a str,
    pub text: &'a str,
    pub candidates: &'a [String],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredCandidate {
    #[serde(default)]
    pub candidate: Option<String>,
    pub probability: Option<f64>,
    pub compatible: bool,
    #[serde(default)]
    pub token_id: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub results: Vec<ScoredCandidate>,
    #[serde(default)]
    pub model_mask_token: Option<String>,
    #[serde(default)]
    pub normalized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizeResponse {
    pub pieces: Vec<String>,
}

pub struct RemoteScorer {
    model_name: String,
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn new(model_name: &str, config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            model_name: model_name.to_string(),
            config,
            agent,
        }
    }

    fn endpoint(&self) -> Result<String, ScorerError> {
        self.config
            .endpoint
            .clone()
            .or_else(|| std::env::var(ENDPOINT_ENV).ok())
            .map(|e| e.trim_end_matches('/').to_string())
            .ok_or_else(|| {
                ScorerError::BackendUnreachable(format!("no endpoint configured (set {ENDPOINT_ENV})"))
            })
    }

    fn read_body(
        &self,
        result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<String, ScorerError> {
        let mut resp = result.map_err(|e| ScorerError::BackendUnreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ScorerError::BackendUnreachable(e.to_string()))?;
        match status {
            200..=299 => Ok(body),
            400 => Err(ScorerError::InvalidQuery(body)),
            // Model still loading or overloaded: worth another attempt.
            502..=504 => Err(ScorerError::BackendUnreachable(format!("{status}: {body}"))),
            _ => Err(ScorerError::Backend {
                status,
                message: body,
            }),
        }
    }
}

impl Scorer for RemoteScorer {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn score(&self, query: &MaskedQuery) -> Result<Vec<CandidateProbability>, ScorerError> {
        query.validate()?;
        let url = format!("{}/v1/score", self.endpoint()?);
        let req = ScoreRequest {
            model: &self.model_name,
            text: &query.text,
            candidates: &query.candidates,
        };
        let body = self.read_body(self.agent.post(&url).send_json(&req))?;
        let resp: ScoreResponse =
            serde_json::from_str(&body).map_err(|e| ScorerError::Protocol(e.to_string()))?;
        decode_score(query, resp)
    }

    fn vocab_check(&self, word: &str) -> Result<VocabStatus, ScorerError> {
        let url = format!("{}/v1/tokenize", self.endpoint()?);
        let call = self
            .agent
            .get(&url)
            .query("model", &self.model_name)
            .query("word", word)
            .call();
        let body = self.read_body(call)?;
        let resp: TokenizeResponse =
            serde_json::from_str(&body).map_err(|e| ScorerError::Protocol(e.to_string()))?;
        match resp.pieces.len() {
            0 => Err(ScorerError::Protocol(format!("no pieces for {word:?}"))),
            1 => Ok(VocabStatus::SingleToken),
            _ => Ok(VocabStatus::MultiToken(resp.pieces)),
        }
    }

    fn max_in_flight(&self) -> Option<usize> {
        Some(self.config.max_in_flight.max(1))
    }
}

fn decode_score(
    query: &MaskedQuery,
    resp: ScoreResponse,
) -> Result<Vec<CandidateProbability>, ScorerError> {
    if resp.results.len() != query.candidates.len() {
        return Err(ScorerError::Protocol(format!(
            "expected {} results, got {}",
            query.candidates.len(),
            resp.results.len()
        )));
    }
    query
        .candidates
        .iter()
        .zip(resp.results)
        .map(|(cand, r)| {
            if let Some(echo) = &r.candidate {
                // Uncased services may echo a lowercased candidate.
                if !echo.eq_ignore_ascii_case(cand) {
                    return Err(ScorerError::Protocol(format!(
                        "result for {echo:?} where {cand:?} expected"
                    )));
                }
            }
            match (r.compatible, r.probability) {
                (true, Some(p)) if (0.0..=1.0).contains(&p) => {
                    Ok(CandidateProbability::compatible(cand.clone(), p))
                }
                (false, None) => Ok(CandidateProbability::incompatible(cand.clone())),
                (c, p) => Err(ScorerError::Protocol(format!(
                    "candidate {cand:?}: compatible={c} with probability {p:?}"
                ))),
            }
        })
        .collect()
}
