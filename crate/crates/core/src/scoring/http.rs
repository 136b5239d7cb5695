//! Scoring through an OpenAI-compatible completions endpoint.
//!
//! The full text `prefix + target` is sent with `echo=true`, `max_tokens=0`
//! and `logprobs=0`. Returned tokens carry character offsets; tokens that
//! start at or after the prefix length are the target scores.

use std::fmt;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendDescriptor, BackendKind, ScoreError, ScoreRequest, ScoredToken, SequenceScore};

/// Sequence-start markers dropped from the front of an echoed prompt.
pub const BOS_MARKERS: [&str; 3] = ["<s>", "<|endoftext|>", "<|begin_of_text|>"];

/// How a token that begins before the boundary is treated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// Any straddling token is an error.
    #[default]
    Strict,
    /// A token whose prefix-side part is only whitespace (the joining space)
    /// is scored as a target token.
    PadSpace,
}

fn default_parallelism() -> usize {
    4
}
fn default_timeout_secs() -> f64 {
    60.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full URL of the completions route.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default)]
    pub boundary: BoundaryMode,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: None,
            parallelism: default_parallelism(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
            boundary: BoundaryMode::Strict,
        }
    }
}

impl fmt::Debug for HttpConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpConfig")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key_env", &self.api_key_env)
            .field("parallelism", &self.parallelism)
            .field("timeout_secs", &self.timeout_secs)
            .field("max_retries", &self.max_retries)
            .field("boundary", &self.boundary)
            .finish()
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    echo: bool,
    logprobs: u32,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    #[serde(default)]
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

/// The `choices[0].logprobs` object of a completions response.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Logprobs {
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<Option<f64>>,
    pub text_offset: Vec<usize>,
}

/// Extracts the target tokens from an echoed prompt.
///
/// `boundary` is the character length of the prefix. Leading
/// sequence-start markers are dropped; tokens ending at or before the
/// boundary are prefix context; a token crossing it is an error unless
/// `mode` is [`BoundaryMode::PadSpace`] and its prefix-side part is
/// whitespace.
pub fn partition_tokens(
    full_text: &str,
    boundary: usize,
    logprobs: &Logprobs,
    mode: BoundaryMode,
) -> Result<SequenceScore, ScoreError> {
    let n = logprobs.tokens.len();
    if logprobs.token_logprobs.len() != n || logprobs.text_offset.len() != n {
        return Err(ScoreError::MissingLogprobs(format!(
            "{n} tokens, {} logprobs, {} offsets",
            logprobs.token_logprobs.len(),
            logprobs.text_offset.len()
        )));
    }
    let chars: Vec<char> = full_text.chars().collect();
    let mut skip_bos = true;
    let mut out = Vec::new();
    for i in 0..n {
        let token = &logprobs.tokens[i];
        if skip_bos && BOS_MARKERS.contains(&token.as_str()) {
            continue;
        }
        skip_bos = false;
        let start = logprobs.text_offset[i];
        let end = start + token.chars().count();
        if end <= boundary && start < boundary {
            continue;
        }
        let text = if start >= boundary {
            token.clone()
        } else {
            let overlap: String = chars.get(start..boundary).map(|c| c.iter().collect()).unwrap_or_default();
            if mode == BoundaryMode::PadSpace && !overlap.is_empty() && overlap.chars().all(char::is_whitespace) {
                token.chars().skip(boundary - start).collect()
            } else {
                return Err(ScoreError::TokenBoundaryMisaligned {
                    token: token.clone(),
                    start,
                    end,
                    boundary,
                });
            }
        };
        let logprob = logprobs.token_logprobs[i]
            .ok_or_else(|| ScoreError::MissingLogprobs(format!("token {i} ({token:?}) has no logprob")))?;
        out.push(ScoredToken { text, logprob });
    }
    if out.is_empty() {
        return Err(ScoreError::MissingLogprobs("no tokens after the boundary".into()));
    }
    Ok(SequenceScore { tokens: out })
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    permits: Permits,
    descriptor: BackendDescriptor,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum Attempt {
    Done(Result<SequenceScore, ScoreError>),
    Retry(ScoreError),
}

impl HttpBackend {
    /// Reads the API key from the configured environment variable, if any.
    pub fn new(config: HttpConfig) -> Result<Self, ScoreError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ScoreError::BackendUnavailable(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        Ok(Self::with_api_key(config, api_key))
    }

    pub fn with_api_key(config: HttpConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let descriptor = BackendDescriptor {
            backend_id: format!("http:{}@{}", config.model, config.endpoint),
            kind: BackendKind::Http,
        };
        Self { permits: Permits::new(config.parallelism), config, api_key, agent, descriptor }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn attempt(&self, full_text: &str, boundary: usize) -> Attempt {
        let body = CompletionRequest {
            model: &self.config.model,
            prompt: full_text,
            max_tokens: 0,
            echo: true,
            logprobs: 0,
        };
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let response = {
            let _permit = self.permits.acquire();
            req.send_json(&body).and_then(|mut r| {
                let status = r.status().as_u16();
                r.body_mut().read_to_string().map(|text| (status, text))
            })
        };
        let (status, text) = match response {
            Ok(ok) => ok,
            Err(ureq::Error::Timeout(t)) => return Attempt::Retry(ScoreError::Timeout(t.to_string())),
            Err(e) => return Attempt::Retry(ScoreError::BackendUnavailable(e.to_string())),
        };
        if status == 429 || status >= 500 {
            return Attempt::Retry(ScoreError::HttpError { status, body: text });
        }
        if !(200..300).contains(&status) {
            return Attempt::Done(Err(ScoreError::HttpError { status, body: text }));
        }
        let parsed: CompletionResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => return Attempt::Done(Err(ScoreError::MissingLogprobs(format!("unparseable response: {e}")))),
        };
        let logprobs = match parsed.choices.into_iter().next().and_then(|c| c.logprobs) {
            Some(l) => l,
            None => return Attempt::Done(Err(ScoreError::MissingLogprobs("choices[0].logprobs absent".into()))),
        };
        Attempt::Done(partition_tokens(full_text, boundary, &logprobs, self.config.boundary))
    }
}

impl Backend for HttpBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn score(&self, request: &ScoreRequest) -> Result<SequenceScore, ScoreError> {
        if request.target.is_empty() {
            return Err(ScoreError::EmptyTarget);
        }
        let full_text = format!("{}{}", request.prefix, request.target);
        let boundary = request.prefix.chars().count();
        let mut tries = 0;
        loop {
            match self.attempt(&full_text, boundary) {
                Attempt::Done(result) => return result,
                Attempt::Retry(err) if tries >= self.config.max_retries => return Err(err),
                Attempt::Retry(err) => {
                    let wait = self.config.backoff_ms.saturating_mul(1 << tries.min(16));
                    log::warn!("scoring request failed ({err}); retry {} in {wait} ms", tries + 1);
                    thread::sleep(Duration::from_millis(wait));
                    tries += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(tokens: &[(&str, usize, Option<f64>)]) -> Logprobs {
        Logprobs {
            tokens: tokens.iter().map(|t| t.0.to_string()).collect(),
            text_offset: tokens.iter().map(|t| t.1).collect(),
            token_logprobs: tokens.iter().map(|t| t.2).collect(),
        }
    }

    #[test]
    fn aligned_boundary() {
        let full = "Alyssa rose. She works hard";
        let l = lp(&[
            ("Alyssa", 0, None),
            (" rose.", 6, Some(-1.0)),
            (" She", 12, Some(-0.5)),
            (" works", 16, Some(-0.25)),
            (" hard", 22, Some(-0.125)),
        ]);
        let s = partition_tokens(full, 12, &l, BoundaryMode::Strict).unwrap();
        assert_eq!(s.text(), " She works hard");
        assert_eq!(s.logprobs().collect::<Vec<_>>(), vec![-0.5, -0.25, -0.125]);
    }

    #[test]
    fn straddle_is_an_error() {
        let full = "Kelly was a plumber.";
        let l = lp(&[
            ("Kelly", 0, None),
            (" was", 5, Some(-1.0)),
            (" ", 9, Some(-1.0)),
            ("a plu", 10, Some(-1.0)),
            ("mber.", 15, Some(-1.0)),
        ]);
        assert_eq!(
            partition_tokens(full, 12, &l, BoundaryMode::Strict),
            Err(ScoreError::TokenBoundaryMisaligned { token: "a plu".into(), start: 10, end: 15, boundary: 12 })
        );
        assert!(matches!(
            partition_tokens(full, 12, &l, BoundaryMode::PadSpace),
            Err(ScoreError::TokenBoundaryMisaligned { .. })
        ));
    }

    #[test]
    fn pad_space_tolerates_joining_space() {
        let full = "Kelly rose. She works";
        let l = lp(&[("Kelly", 0, None), (" rose.", 5, Some(-1.0)), (" She", 11, Some(-0.5)), (" works", 15, Some(-0.25))]);
        assert!(matches!(
            partition_tokens(full, 12, &l, BoundaryMode::Strict),
            Err(ScoreError::TokenBoundaryMisaligned { .. })
        ));
        let s = partition_tokens(full, 12, &l, BoundaryMode::PadSpace).unwrap();
        assert_eq!(s.text(), "She works");
        assert_eq!(s.logprobs().collect::<Vec<_>>(), vec![-0.5, -0.25]);
    }

    #[test]
    fn bos_and_empty_prefix() {
        let l = lp(&[("<s>", 0, None), ("He", 0, Some(-2.0)), (" ran", 2, Some(-1.0))]);
        let s = partition_tokens("He ran", 0, &l, BoundaryMode::Strict).unwrap();
        assert_eq!(s.text(), "He ran");
        let l = lp(&[("He", 0, None), (" ran", 2, Some(-1.0))]);
        assert!(matches!(
            partition_tokens("He ran", 0, &l, BoundaryMode::Strict),
            Err(ScoreError::MissingLogprobs(_))
        ));
    }

    #[test]
    fn mismatched_lengths() {
        let mut l = lp(&[("a", 0, Some(-1.0))]);
        l.text_offset.clear();
        assert!(matches!(partition_tokens("a", 0, &l, BoundaryMode::Strict), Err(ScoreError::MissingLogprobs(_))));
    }

    #[test]
    fn debug_hides_key() {
        let b = HttpBackend::with_api_key(HttpConfig::new("http://127.0.0.1:9/v1/completions", "m"), Some("sk-secret".into()));
        assert!(!format!("{b:?}").contains("sk-secret"));
        assert_eq!(b.backend_id(), "http:m@http://127.0.0.1:9/v1/completions");
    }

    #[test]
    fn boundary_mode_names() {
        assert_eq!(serde_json::to_string(&BoundaryMode::PadSpace).unwrap(), "\"pad-space\"");
    }
}
