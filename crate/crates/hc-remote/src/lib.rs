//! Echo-scoring client for OpenAI-compatible completions endpoints.
//!
//! The only widely supported way to get per-token log-probabilities of a
//! *given* text out of a hosted model is the echo idiom: send the text as
//! the prompt, request zero new tokens with `echo` and `logprobs`, and
//! read the prompt's own token scores back. This crate wraps that idiom
//! behind the workspace's [`Scorer`] trait: conditional scoring prepends
//! the stored prompt text plus a blank-line separator, unconditional
//! scoring prepends the configured null context, and the target's exact
//! token span is located and re-based before the scores are returned.
//!
//! The client is synchronous, retries transient failures with jittered
//! exponential backoff, and bounds in-flight requests with an internal
//! semaphore so one batch cannot stampede an endpoint.

use std::ops::Range;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use hc_core::scorer::{ScoreError, Scorer, ScoringRequest};
use hc_core::scores::context_digest;
use hc_core::TokenScores;

/// Separator inserted between a conditioning prompt and the target, chosen
/// to keep tokenizers from merging across the boundary. Recorded here so
/// reports can cite it.
pub const PROMPT_SEPARATOR: &str = "\n\n";

const BACKOFF_BASE: Duration = Duration::from_millis(500);

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("endpoint does not support echo scoring: {0}")]
    UnsupportedBackend(String),
    #[error(
        "the first prompt token has no logprob; configure a nonempty null context so the \
         target never starts at token zero"
    )]
    UnsupportedNullContext,
    #[error("remote scoring only supports temperature 1, got {0}")]
    UnsupportedTemperature(f64),
    #[error("scoring failed: {0}")]
    ScoringFailed(String),
    #[error("cannot align target span: {0}")]
    SpanAlignment(String),
    #[error("empty target range")]
    InvalidRange,
}

impl From<RemoteError> for ScoreError {
    fn from(e: RemoteError) -> ScoreError {
        match e {
            RemoteError::UnsupportedTemperature(t) => ScoreError::UnsupportedTemperature(t),
            RemoteError::SpanAlignment(m) => ScoreError::SpanAlignment(m),
            RemoteError::InvalidRange => ScoreError::SpanAlignment("empty target range".into()),
            RemoteError::ScoringFailed(m) => ScoreError::ScoringFailed(m),
            other => ScoreError::ScoringFailed(other.to_string()),
        }
    }
}

/// Connection settings for one OpenAI-compatible endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Absolute base URL, e.g. `http://localhost:8000`; the client appends
    /// `/v1/completions`.
    pub base_url: String,
    /// Model name sent with every request and stamped into scores as the
    /// scorer id.
    pub model_name: String,
    /// Bearer token; the `HC_API_KEY` environment variable overrides it.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub api_key: Option<String>,
    pub max_concurrency: usize,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Preamble for unconditional scoring. Empty means the bare target is
    /// the whole prompt, which most endpoints cannot score at token zero.
    pub null_context: String,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key: None,
            max_concurrency: 4,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            null_context: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), RemoteError> {
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(RemoteError::InvalidConfig(format!(
                "base_url must be an absolute http(s) URL, got {:?}",
                self.base_url
            )));
        }
        if self.model_name.is_empty() {
            return Err(RemoteError::InvalidConfig("model_name must be nonempty".into()));
        }
        if self.max_concurrency < 1 {
            return Err(RemoteError::InvalidConfig(
                "max_concurrency must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// The unconditional preamble, exactly as configured.
    pub fn null_context_prompt(&self) -> &str {
        &self.null_context
    }

    fn completions_url(&self) -> String {
        format!("{}/v1/completions", self.base_url.trim_end_matches('/'))
    }

    fn effective_api_key(&self) -> Option<String> {
        match std::env::var("HC_API_KEY") {
            Ok(v) if !v.is_empty() => Some(v),
            _ => self.api_key.clone(),
        }
    }
}

// ── transport ───────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("network error: {0}")]
    Network(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
}

impl TransportError {
    fn transient(&self) -> bool {
        match self {
            TransportError::Network(_) => true,
            TransportError::Http { status, .. } => {
                *status == 408 || *status == 429 || *status >= 500
            }
        }
    }
}

/// The HTTP boundary, injectable so tests can observe and fail calls
/// without a socket.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        body: &serde_json::Value,
        api_key: Option<&str>,
        timeout: Duration,
    ) -> Result<serde_json::Value, TransportError>;
}

struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    fn new() -> Result<Self, RemoteError> {
        let client = reqwest::blocking::Client::builder()
            .no_proxy()
            .build()
            .map_err(|e| RemoteError::InvalidConfig(format!("http client: {e}")))?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        body: &serde_json::Value,
        api_key: Option<&str>,
        timeout: Duration,
    ) -> Result<serde_json::Value, TransportError> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        log::debug!("POST {url} (authorization {})", if api_key.is_some() { "bearer <redacted>" } else { "none" });
        let resp = req.send().map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Http {
                status: status.as_u16(),
                body: truncate(&text, 300),
            });
        }
        serde_json::from_str(&text)
            .map_err(|e| TransportError::Network(format!("invalid JSON response: {e}")))
    }
}

fn truncate(text: &str, limit: usize) -> String {
    if text.chars().count() <= limit {
        text.to_string()
    } else {
        let cut: String = text.chars().take(limit).collect();
        format!("{cut}…")
    }
}

/// Jittered exponential backoff: 0.5 s · 2^attempt, scaled by a random
/// factor in [0.5, 1.5).
fn backoff_delay(attempt: u32, jitter: f64) -> Duration {
    debug_assert!((0.0..1.0).contains(&jitter));
    let base = BACKOFF_BASE.as_secs_f64() * 2f64.powi(attempt as i32);
    Duration::from_secs_f64(base * (0.5 + jitter))
}

// ── bounded concurrency ─────────────────────────────────────────────────

struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.semaphore.permits.lock().unwrap() += 1;
        self.semaphore.available.notify_one();
    }
}

// ── response shape ──────────────────────────────────────────────────────

#[derive(Deserialize)]
struct CompletionsResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    logprobs: Option<EchoLogprobs>,
}

#[derive(Deserialize)]
struct EchoLogprobs {
    tokens: Option<Vec<String>>,
    token_logprobs: Option<Vec<Option<f64>>>,
    text_offset: Option<Vec<usize>>,
}

/// Find the contiguous token range whose character span is exactly
/// `start..end`. Offsets are character positions of each token in the
/// prompt, strictly increasing; `lengths` are token character counts.
pub fn locate_span(
    offsets: &[usize],
    lengths: &[usize],
    start: usize,
    end: usize,
) -> Result<Range<usize>, RemoteError> {
    if start >= end {
        return Err(RemoteError::InvalidRange);
    }
    let first = offsets
        .iter()
        .position(|&o| o == start)
        .ok_or_else(|| RemoteError::SpanAlignment(format!("no token begins at offset {start}")))?;
    let mut i = first;
    let mut cursor = start;
    while cursor < end {
        if i >= offsets.len() || offsets[i] != cursor {
            return Err(RemoteError::SpanAlignment(format!(
                "token gap at offset {cursor}"
            )));
        }
        cursor += lengths[i];
        i += 1;
    }
    if cursor != end {
        return Err(RemoteError::SpanAlignment(format!(
            "a token straddles the span end ({cursor} past {end})"
        )));
    }
    Ok(first..i)
}

// ── the client ──────────────────────────────────────────────────────────

/// A [`Scorer`] backed by a remote completions endpoint.
pub struct RemoteScorer {
    cfg: EndpointConfig,
    transport: Box<dyn Transport>,
    semaphore: Semaphore,
}

impl RemoteScorer {
    pub fn new(cfg: EndpointConfig) -> Result<Self, RemoteError> {
        let transport = HttpTransport::new()?;
        Self::with_transport(cfg, Box::new(transport))
    }

    /// Build with an injected transport; tests use this to simulate an
    /// endpoint without sockets.
    pub fn with_transport(
        cfg: EndpointConfig,
        transport: Box<dyn Transport>,
    ) -> Result<Self, RemoteError> {
        cfg.validate()?;
        let semaphore = Semaphore::new(cfg.max_concurrency);
        Ok(RemoteScorer {
            cfg,
            transport,
            semaphore,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// Score `request.target` under the remote model, conditionally when
    /// the request has a context. At most one response is ever turned into
    /// scores, however many retries the transport needed.
    pub fn score_remote(&self, request: &ScoringRequest) -> Result<TokenScores, RemoteError> {
        if request.target.is_empty() {
            return Err(RemoteError::InvalidRange);
        }
        if request.temperature != 1.0 {
            return Err(RemoteError::UnsupportedTemperature(request.temperature));
        }
        let (prefix, digest) = match request.context.as_deref() {
            Some(ctx) => (format!("{ctx}{PROMPT_SEPARATOR}"), context_digest(ctx)),
            None => (
                self.cfg.null_context.clone(),
                context_digest(&self.cfg.null_context),
            ),
        };
        match self.score_with_prefix(&prefix, &request.target, &digest) {
            // One retry with the separator forced in, for tokenizers that
            // merged across the boundary.
            Err(RemoteError::SpanAlignment(_)) => {
                let padded = format!("{prefix}{PROMPT_SEPARATOR}");
                self.score_with_prefix(&padded, &request.target, &digest)
            }
            other => other,
        }
    }

    fn score_with_prefix(
        &self,
        prefix: &str,
        target: &str,
        digest: &str,
    ) -> Result<TokenScores, RemoteError> {
        let prompt = format!("{prefix}{target}");
        let body = serde_json::json!({
            "model": self.cfg.model_name,
            "prompt": prompt,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let response = self.post_with_retries(&body)?;
        let parsed: CompletionsResponse = serde_json::from_value(response).map_err(|e| {
            RemoteError::UnsupportedBackend(format!("unexpected response shape: {e}"))
        })?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| RemoteError::UnsupportedBackend("response has no choices".into()))?;
        let echoed = choice.logprobs.ok_or_else(|| {
            RemoteError::UnsupportedBackend(
                "response carries no logprobs; the endpoint must support echo=true with logprobs"
                    .into(),
            )
        })?;
        let (tokens, logprobs, offsets) = match (echoed.tokens, echoed.token_logprobs, echoed.text_offset) {
            (Some(t), Some(l), Some(o)) => (t, l, o),
            _ => {
                return Err(RemoteError::UnsupportedBackend(
                    "logprobs object is missing tokens, token_logprobs, or text_offset".into(),
                ))
            }
        };
        if tokens.len() != logprobs.len() || tokens.len() != offsets.len() {
            return Err(RemoteError::ScoringFailed(format!(
                "logprob arrays disagree in length ({}/{}/{})",
                tokens.len(),
                logprobs.len(),
                offsets.len()
            )));
        }
        if !offsets.windows(2).all(|w| w[0] < w[1]) {
            return Err(RemoteError::ScoringFailed(
                "text offsets are not strictly increasing".into(),
            ));
        }

        let start = prefix.chars().count();
        let end = start + target.chars().count();
        let lengths: Vec<usize> = tokens.iter().map(|t| t.chars().count()).collect();
        let span = locate_span(&offsets, &lengths, start, end)?;

        let span_text: String = tokens[span.clone()].concat();
        if span_text != target {
            return Err(RemoteError::SpanAlignment(format!(
                "extracted span {:?} does not equal the target",
                truncate(&span_text, 60)
            )));
        }
        let mut span_logprobs = Vec::with_capacity(span.len());
        for (k, lp) in logprobs[span.clone()].iter().enumerate() {
            match lp {
                Some(v) => span_logprobs.push(*v),
                None if span.start + k == 0 => return Err(RemoteError::UnsupportedNullContext),
                None => {
                    return Err(RemoteError::ScoringFailed(format!(
                        "null logprob inside the target span at token {}",
                        span.start + k
                    )))
                }
            }
        }
        let rebased: Vec<usize> = offsets[span.clone()].iter().map(|o| o - start).collect();
        TokenScores::new(
            tokens[span].to_vec(),
            span_logprobs,
            rebased,
            self.cfg.model_name.clone(),
            digest,
            1.0,
        )
        .map_err(|e| RemoteError::ScoringFailed(e.to_string()))
    }

    fn post_with_retries(&self, body: &serde_json::Value) -> Result<serde_json::Value, RemoteError> {
        let _permit = self.semaphore.acquire();
        let url = self.cfg.completions_url();
        let key = self.cfg.effective_api_key();
        let mut attempt = 0u32;
        loop {
            match self
                .transport
                .post_json(&url, body, key.as_deref(), self.cfg.timeout)
            {
                Ok(v) => return Ok(v),
                Err(e) if e.transient() && attempt < self.cfg.max_retries => {
                    let jitter = rand::Rng::gen_range(&mut rand::thread_rng(), 0.0..1.0);
                    let delay = backoff_delay(attempt, jitter);
                    log::debug!("retrying after {delay:?}: {e}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(RemoteError::ScoringFailed(e.to_string())),
            }
        }
    }
}

impl Scorer for RemoteScorer {
    fn id(&self) -> String {
        self.cfg.model_name.clone()
    }

    fn score(&self, request: &ScoringRequest) -> Result<TokenScores, ScoreError> {
        self.score_remote(request).map_err(ScoreError::from)
    }
}
