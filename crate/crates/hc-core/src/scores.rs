//! Per-token score containers shared by every scoring backend.
//!
//! A [`TokenScores`] is the raw material all downstream accounting works on:
//! one log-probability per token of a scored span, in natural-log units,
//! together with enough provenance (scorer id, context digest, temperature)
//! to tell two incomparable scorings apart.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default floor applied by [`floor_logprobs`] when the caller opts in:
/// anything below this (including `-inf`) is clamped up to it.
pub const DEFAULT_LOGPROB_FLOOR: f64 = -30.0;

/// Flag string recorded in reports whenever a logprob floor fired.
pub const FLOORED_LOGPROB_FLAG: &str = "floored-logprob";

#[derive(Debug, Error, PartialEq)]
pub enum InvalidScores {
    #[error("token, logprob and offset lists must have equal nonzero length")]
    LengthMismatch,
    #[error("logprob at index {0} is not finite")]
    NonFinite(usize),
    #[error("logprob at index {0} is positive ({1})")]
    Positive(usize, f64),
    #[error("offsets must be strictly increasing (index {0})")]
    OffsetsNotIncreasing(usize),
    #[error("token at index {0} does not tile the scored span (offset gap)")]
    OffsetGap(usize),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
}

/// Token-level scores for one scored span of text.
///
/// Invariants (enforced by [`TokenScores::new`]):
/// * the three vectors have the same nonzero length,
/// * every logprob is finite and `<= 0`,
/// * offsets are strictly increasing character offsets starting at 0, and
///   each token's character length carries it exactly to the next offset,
///   so the concatenation of `tokens` reproduces the scored span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub tokens: Vec<String>,
    /// Natural-log probabilities, one per token.
    pub logprobs: Vec<f64>,
    /// Character offset of each token within the scored span.
    pub offsets: Vec<usize>,
    /// Identifier of the backend that produced the scores.
    pub scorer_id: String,
    /// Hash of the conditioning text; empty for unconditional scores.
    pub context_digest: String,
    /// Temperature of the scoring law these logprobs were taken from.
    pub temperature: f64,
}

impl TokenScores {
    pub fn new(
        tokens: Vec<String>,
        logprobs: Vec<f64>,
        offsets: Vec<usize>,
        scorer_id: impl Into<String>,
        context_digest: impl Into<String>,
        temperature: f64,
    ) -> Result<Self, InvalidScores> {
        if tokens.is_empty() || tokens.len() != logprobs.len() || tokens.len() != offsets.len() {
            return Err(InvalidScores::LengthMismatch);
        }
        if !(temperature > 0.0) {
            return Err(InvalidScores::BadTemperature(temperature));
        }
        for (i, lp) in logprobs.iter().enumerate() {
            if !lp.is_finite() {
                return Err(InvalidScores::NonFinite(i));
            }
            if *lp > 0.0 {
                return Err(InvalidScores::Positive(i, *lp));
            }
        }
        if offsets[0] != 0 {
            return Err(InvalidScores::OffsetsNotIncreasing(0));
        }
        for i in 1..offsets.len() {
            if offsets[i] <= offsets[i - 1] {
                return Err(InvalidScores::OffsetsNotIncreasing(i));
            }
        }
        // Tokens must tile the span: each token's char count reaches the
        // next offset exactly.
        for i in 0..tokens.len() - 1 {
            let len = tokens[i].chars().count();
            if offsets[i] + len != offsets[i + 1] {
                return Err(InvalidScores::OffsetGap(i));
            }
        }
        Ok(Self {
            tokens,
            logprobs,
            offsets,
            scorer_id: scorer_id.into(),
            context_digest: context_digest.into(),
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Clamp raw logprobs from below, returning whether anything changed.
///
/// Backends occasionally hand back `-inf` (or absurdly negative values) for
/// tokens they consider impossible. By default that is an error at
/// [`TokenScores::new`]; callers that explicitly opt in can floor the raw
/// values first and record [`FLOORED_LOGPROB_FLAG`] in the resulting report.
pub fn floor_logprobs(logprobs: &mut [f64], floor: f64) -> bool {
    let mut touched = false;
    for lp in logprobs.iter_mut() {
        if *lp < floor {
            *lp = floor;
            touched = true;
        }
    }
    touched
}

/// Short hex digest identifying a conditioning text. Empty input maps to the
/// empty string so unconditional scores are visibly unconditional.
pub fn context_digest(context: &str) -> String {
    if context.is_empty() {
        return String::new();
    }
    let hash = Sha256::digest(context.as_bytes());
    let mut out = String::with_capacity(16);
    for byte in hash.iter().take(8) {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(tokens: &[&str], logprobs: &[f64]) -> Result<TokenScores, InvalidScores> {
        let mut offsets = Vec::new();
        let mut at = 0usize;
        for t in tokens {
            offsets.push(at);
            at += t.chars().count();
        }
        TokenScores::new(
            tokens.iter().map(|t| t.to_string()).collect(),
            logprobs.to_vec(),
            offsets,
            "test",
            "",
            1.0,
        )
    }

    #[test]
    fn accepts_well_formed_scores() {
        let s = scores(&["a", " b"], &[-0.5, -1.0]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.offsets, vec![0, 1]);
    }

    #[test]
    fn rejects_empty_and_mismatched_lengths() {
        assert_eq!(scores(&[], &[]).unwrap_err(), InvalidScores::LengthMismatch);
        assert_eq!(
            scores(&["a"], &[-0.5, -1.0]).unwrap_err(),
            InvalidScores::LengthMismatch
        );
    }

    #[test]
    fn rejects_non_finite_and_positive_logprobs() {
        assert_eq!(
            scores(&["a", " b"], &[f64::NEG_INFINITY, -1.0]).unwrap_err(),
            InvalidScores::NonFinite(0)
        );
        assert_eq!(
            scores(&["a", " b"], &[-1.0, 0.25]).unwrap_err(),
            InvalidScores::Positive(1, 0.25)
        );
    }

    #[test]
    fn zero_logprob_is_allowed() {
        // Probability exactly 1 is legal (certain token).
        assert!(scores(&["a"], &[0.0]).is_ok());
    }

    #[test]
    fn rejects_tokens_that_do_not_tile_the_span() {
        let err = TokenScores::new(
            vec!["ab".into(), "cd".into()],
            vec![-1.0, -1.0],
            vec![0, 3],
            "test",
            "",
            1.0,
        )
        .unwrap_err();
        assert_eq!(err, InvalidScores::OffsetGap(0));
    }

    #[test]
    fn offsets_count_characters_not_bytes() {
        // Two-char token with a multibyte char: the next offset is 2.
        let ok = TokenScores::new(
            vec!["é!".into(), "x".into()],
            vec![-1.0, -1.0],
            vec![0, 2],
            "test",
            "",
            1.0,
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn flooring_clamps_and_reports() {
        let mut lps = vec![-1.0, f64::NEG_INFINITY, -45.0];
        assert!(floor_logprobs(&mut lps, DEFAULT_LOGPROB_FLOOR));
        assert_eq!(lps, vec![-1.0, -30.0, -30.0]);
        assert!(!floor_logprobs(&mut lps, DEFAULT_LOGPROB_FLOOR));
    }

    #[test]
    fn context_digest_is_stable_and_empty_for_empty() {
        assert_eq!(context_digest(""), "");
        let d = context_digest("some context");
        assert_eq!(d.len(), 16);
        assert_eq!(d, context_digest("some context"));
        assert_ne!(d, context_digest("other context"));
    }
}
