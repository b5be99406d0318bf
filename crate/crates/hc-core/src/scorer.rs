//! Scoring backend contract plus the shared temperature transform.
//!
//! A scorer turns a [`ScoringRequest`] into [`TokenScores`]: the logprob of
//! every target token under the backend's law, optionally conditioned on a
//! context text. Implementations in this workspace are the exact reference
//! language model ([`crate::reflm::ReferenceLm`]) and an HTTP echo-scoring
//! client in the companion remote crate.

use thiserror::Error;

use crate::scores::TokenScores;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("target text must be nonempty")]
    EmptyTarget,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("backend only scores at temperature 1, got {0}")]
    UnsupportedTemperature(f64),
    #[error("input is not a probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("corpus must contain at least two word tokens")]
    EmptyCorpus,
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("tokenization cannot cover the target exactly: {0}")]
    SpanAlignment(String),
    #[error("scoring failed: {0}")]
    ScoringFailed(String),
}

/// One scoring job: a target to score, an optional conditioning text, and
/// the temperature of the scoring law.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringRequest {
    pub context: Option<String>,
    pub target: String,
    pub temperature: f64,
}

impl ScoringRequest {
    /// Unconditional request at temperature 1.
    pub fn new(target: impl Into<String>) -> Result<Self, ScoreError> {
        let target = target.into();
        if target.is_empty() {
            return Err(ScoreError::EmptyTarget);
        }
        Ok(Self {
            context: None,
            target,
            temperature: 1.0,
        })
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.context = Some(context.into());
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self, ScoreError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(ScoreError::BadTemperature(temperature));
        }
        self.temperature = temperature;
        Ok(self)
    }
}

/// A scoring backend. `score` must be deterministic for a given request.
pub trait Scorer: Send + Sync {
    /// Stable identifier recorded in every score and report.
    fn id(&self) -> String;

    fn score(&self, request: &ScoringRequest) -> Result<TokenScores, ScoreError>;
}

/// Rescale a probability distribution to temperature `t`:
/// p_i ↦ p_i^(1/t) / Σ_j p_j^(1/t).
///
/// `t = 1` returns the input unchanged; `t → 0` concentrates on the mode;
/// large `t` flattens towards uniform. Zero entries stay exactly zero. The
/// input must already sum to 1 within 1e-9.
pub fn apply_temperature(distribution: &[f64], t: f64) -> Result<Vec<f64>, ScoreError> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(ScoreError::BadTemperature(t));
    }
    if distribution.is_empty() {
        return Err(ScoreError::InvalidDistribution("empty".into()));
    }
    let mut sum = 0.0f64;
    for (i, p) in distribution.iter().enumerate() {
        if !p.is_finite() || *p < 0.0 {
            return Err(ScoreError::InvalidDistribution(format!(
                "entry {i} is {p}"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(ScoreError::InvalidDistribution(format!(
            "entries sum to {sum}"
        )));
    }
    if t == 1.0 {
        return Ok(distribution.to_vec());
    }
    // Work in the log domain relative to the max entry so extreme
    // temperatures neither overflow nor underflow.
    let max = distribution.iter().cloned().fold(f64::MIN, f64::max);
    let weights: Vec<f64> = distribution
        .iter()
        .map(|p| {
            if *p == 0.0 {
                0.0
            } else {
                ((p.ln() - max.ln()) / t).exp()
            }
        })
        .collect();
    let norm: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / norm).collect())
}
