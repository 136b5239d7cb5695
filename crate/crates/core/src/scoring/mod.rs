//! Teacher-forced conditional scoring.
//!
//! A backend returns `log P(target_i | prefix, target_<i)` for every target
//! token. The prefix conditions the model but never contributes score
//! entries, which is how preamble spans are excluded from likelihoods and
//! perplexities.

pub mod cache;
pub mod http;
pub mod mock;
pub mod table_lm;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::compensated_sum;

pub use cache::{Cached, ScoreCache};
pub use http::{BoundaryMode, HttpBackend, HttpConfig};
pub use table_lm::TableLm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("score target is empty")]
    EmptyTarget,
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("token {token:?} spans chars {start}..{end} across the prefix boundary at {boundary}")]
    TokenBoundaryMisaligned {
        token: String,
        start: usize,
        end: usize,
        boundary: usize,
    },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("token {0:?} is not in the vocabulary and no <unk> entry exists")]
    UnknownToken(String),
    #[error("token {0:?} has zero probability")]
    ZeroProbability(String),
    #[error("HTTP {status}: {body}")]
    HttpError { status: u16, body: String },
    #[error("response is missing logprobs: {0}")]
    MissingLogprobs(String),
}

/// Conditioning context plus the span to score.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prefix: String,
    pub target: String,
}

impl ScoreRequest {
    pub fn new(prefix: impl Into<String>, target: impl Into<String>) -> Result<Self, ScoreError> {
        let target = target.into();
        if target.is_empty() {
            return Err(ScoreError::EmptyTarget);
        }
        Ok(Self { prefix: prefix.into(), target })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    #[serde(rename = "t")]
    pub text: String,
    /// Natural log.
    #[serde(rename = "lp")]
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub tokens: Vec<ScoredToken>,
}

impl SequenceScore {
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Self {
        Self {
            tokens: pairs
                .into_iter()
                .map(|(t, lp)| ScoredToken { text: t.into(), logprob: lp })
                .collect(),
        }
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn logprobs(&self) -> impl Iterator<Item = f64> + '_ {
        self.tokens.iter().map(|t| t.logprob)
    }

    /// Concatenated token texts.
    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }
}

/// Sum of token logprobs.
pub fn sequence_log_likelihood(score: &SequenceScore) -> f64 {
    compensated_sum(score.logprobs())
}

/// `exp(-mean logprob)`. NaN for an empty score.
pub fn per_token_perplexity(score: &SequenceScore) -> f64 {
    let n = score.token_count();
    if n == 0 {
        return f64::NAN;
    }
    (-sequence_log_likelihood(score) / n as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Synthetic,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    /// Determines scoring behaviour; part of every cache key.
    pub backend_id: String,
    pub kind: BackendKind,
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn score(&self, request: &ScoreRequest) -> Result<SequenceScore, ScoreError>;

    fn backend_id(&self) -> &str {
        &self.descriptor().backend_id
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }

    fn score(&self, request: &ScoreRequest) -> Result<SequenceScore, ScoreError> {
        (**self).score(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }

    fn score(&self, request: &ScoreRequest) -> Result<SequenceScore, ScoreError> {
        (**self).score(request)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }

    fn score(&self, request: &ScoreRequest) -> Result<SequenceScore, ScoreError> {
        (**self).score(request)
    }
}

/// Scores `target` given `prefix`.
pub fn score<B: Backend + ?Sized>(
    backend: &B,
    prefix: &str,
    target: &str,
) -> Result<SequenceScore, ScoreError> {
    backend.score(&ScoreRequest::new(prefix, target)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn likelihood_and_perplexity() {
        let half = 0.5f64.ln();
        let s = SequenceScore::from_pairs([("a", half), ("b", half)]);
        assert!((sequence_log_likelihood(&s) - 0.25f64.ln()).abs() < 1e-15);
        assert_eq!(sequence_log_likelihood(&SequenceScore::from_pairs([("a", 0.0)])), 0.0);
        assert_eq!(per_token_perplexity(&SequenceScore::from_pairs([("a", 0.0), ("b", 0.0)])), 1.0);

        let s = SequenceScore::from_pairs([("he", 0.6f64.ln()), (" works", 0.2f64.ln())]);
        let want = -(0.6f64 * 0.2).ln();
        assert!((-sequence_log_likelihood(&s) - want).abs() < 1e-12);
        assert!((per_token_perplexity(&s) - (want / 2.0).exp()).abs() < 1e-12);
        assert!((per_token_perplexity(&s) - 2.8868).abs() < 1e-4);
        assert_eq!(s.text(), "he works");
    }

    #[test]
    fn empty_target_rejected() {
        assert_eq!(ScoreRequest::new("x", ""), Err(ScoreError::EmptyTarget));
        assert!(per_token_perplexity(&SequenceScore { tokens: vec![] }).is_nan());
    }

    #[test]
    fn cache_line_token_field_names() {
        let s = SequenceScore::from_pairs([("a", -0.5)]);
        assert_eq!(serde_json::to_string(&s.tokens).unwrap(), r#"[{"t":"a","lp":-0.5}]"#);
    }
}
