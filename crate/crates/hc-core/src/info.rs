//! Pointwise information accounting over token scores.
//!
//! Everything here works in nats on a single concrete output:
//!
//! * `self_information` — I(y), the negated sum of token logprobs;
//! * `mutual_information` — I(x;y) = I(y) − I(y|x), how many nats the
//!   conditioning text removed from the output's surprisal;
//! * `contribution_ratio` — φ = I(x;y) / I(y), the share of the output's
//!   information that came from the conditioning input. φ is at most 1 and
//!   may be negative when conditioning made the output *less* likely;
//! * `minimal_contribution` — φ̂ = (I(y) + N·ln τ) / I(y), a lower bound on
//!   φ that needs no conditioning score: it assumes the machine alone would
//!   keep the per-token geometric-mean probability above a plausibility
//!   threshold τ;
//! * `plausibility_check` — whether a conditional score actually clears τ.
//!
//! Negative values are reported as computed. Clamping for presentation is a
//! display concern and deliberately not done here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scores::TokenScores;

#[derive(Debug, Error, PartialEq)]
pub enum InfoError {
    #[error("logprob at index {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("logprob at index {index} is positive")]
    PositiveLogprob { index: usize },
    #[error("scores disagree on the token sequence: {0}")]
    ScoreMismatch(String),
    #[error("output has zero self-information; contribution is undefined")]
    DegenerateOutput,
    #[error("threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
}

fn checked_sum(scores: &TokenScores) -> Result<f64, InfoError> {
    let mut total = 0.0f64;
    for (index, lp) in scores.logprobs.iter().enumerate() {
        if !lp.is_finite() {
            return Err(InfoError::NonFiniteScore { index });
        }
        if *lp > 0.0 {
            return Err(InfoError::PositiveLogprob { index });
        }
        total += lp;
    }
    Ok(total)
}

/// I(y): total self-information of the scored span, in nats. Nonnegative.
pub fn self_information(scores: &TokenScores) -> Result<f64, InfoError> {
    Ok(-checked_sum(scores)?)
}

/// I(x;y) = I(y) − I(y|x). Positive when conditioning helped predict the
/// output, negative when it hurt.
///
/// Both scores must cover the same token sequence.
pub fn mutual_information(
    unconditional: &TokenScores,
    conditional: &TokenScores,
) -> Result<f64, InfoError> {
    if unconditional.tokens.len() != conditional.tokens.len() {
        return Err(InfoError::ScoreMismatch(format!(
            "token counts differ ({} vs {})",
            unconditional.tokens.len(),
            conditional.tokens.len()
        )));
    }
    if unconditional.tokens != conditional.tokens {
        let at = unconditional
            .tokens
            .iter()
            .zip(&conditional.tokens)
            .position(|(a, b)| a != b)
            .unwrap_or(0);
        return Err(InfoError::ScoreMismatch(format!(
            "tokens differ at index {at}"
        )));
    }
    Ok(self_information(unconditional)? - self_information(conditional)?)
}

/// φ = I(x;y) / I(y). Undefined (error) when I(y) = 0.
pub fn contribution_ratio(
    unconditional: &TokenScores,
    conditional: &TokenScores,
) -> Result<f64, InfoError> {
    let total = self_information(unconditional)?;
    if total == 0.0 {
        return Err(InfoError::DegenerateOutput);
    }
    Ok(mutual_information(unconditional, conditional)? / total)
}

/// φ̂ = (I(y) + N·ln τ) / I(y): the smallest contribution consistent with
/// the machine keeping every-token plausibility above τ on its own.
pub fn minimal_contribution(unconditional: &TokenScores, tau: f64) -> Result<f64, InfoError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(InfoError::InvalidThreshold(tau));
    }
    let total = self_information(unconditional)?;
    if total == 0.0 {
        return Err(InfoError::DegenerateOutput);
    }
    let n = unconditional.len() as f64;
    Ok((total + n * tau.ln()) / total)
}

/// Does the conditional score clear the plausibility threshold?
///
/// True iff the geometric mean of the conditional token probabilities
/// exceeds τ — computed in the log domain as I(y|x) < −N·ln τ, which is the
/// same comparison without leaving nats.
pub fn plausibility_check(conditional: &TokenScores, tau: f64) -> Result<bool, InfoError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(InfoError::InvalidThreshold(tau));
    }
    let cond_info = self_information(conditional)?;
    let n = conditional.len() as f64;
    Ok(cond_info < -(n * tau.ln()))
}

/// Everything the accounting can say about one scored output.
///
/// `phi` and friends are raw values straight from the definitions; a
/// negative `phi` means conditioning made the output less likely and is
/// reported as such.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    /// I(y) in nats.
    pub self_info: f64,
    /// I(y|x) in nats, when a conditional score was supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cond_self_info: Option<f64>,
    /// I(x;y) = I(y) − I(y|x).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mutual_info: Option<f64>,
    /// φ = I(x;y)/I(y).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub phi: Option<f64>,
    /// φ̂, the threshold-based lower bound, when a τ was supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub phi_min: Option<f64>,
    /// Number of scored tokens N.
    pub token_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau: Option<f64>,
    /// Whether the conditional score clears τ (needs both `cond` and `tau`).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub plausible: Option<bool>,
    pub scorer_id: String,
    /// Free-form markers, e.g. "floored-logprob" when a logprob floor fired.
    #[serde(default)]
    pub flags: Vec<String>,
}

/// Assemble a full report from an unconditional score, an optional
/// conditional score, and an optional plausibility threshold.
pub fn build_report(
    unconditional: &TokenScores,
    conditional: Option<&TokenScores>,
    tau: Option<f64>,
) -> Result<ContributionReport, InfoError> {
    if let Some(cond) = conditional {
        if cond.scorer_id != unconditional.scorer_id {
            return Err(InfoError::ScoreMismatch(format!(
                "scores come from different backends ({} vs {})",
                unconditional.scorer_id, cond.scorer_id
            )));
        }
    }
    let self_info = self_information(unconditional)?;
    let mut report = ContributionReport {
        self_info,
        cond_self_info: None,
        mutual_info: None,
        phi: None,
        phi_min: None,
        token_count: unconditional.len(),
        tau,
        plausible: None,
        scorer_id: unconditional.scorer_id.clone(),
        flags: Vec::new(),
    };
    if let Some(cond) = conditional {
        report.cond_self_info = Some(self_information(cond)?);
        report.mutual_info = Some(mutual_information(unconditional, cond)?);
        report.phi = Some(contribution_ratio(unconditional, cond)?);
    }
    if let Some(tau) = tau {
        report.phi_min = Some(minimal_contribution(unconditional, tau)?);
        if let Some(cond) = conditional {
            report.plausible = Some(plausibility_check(cond, tau)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Build scores with synthetic single-char tokens; only logprobs matter.
    fn from_logprobs(logprobs: &[f64]) -> TokenScores {
        let tokens: Vec<String> = (0..logprobs.len()).map(|_| "x".to_string()).collect();
        let offsets: Vec<usize> = (0..logprobs.len()).collect();
        TokenScores::new(tokens, logprobs.to_vec(), offsets, "test", "", 1.0).unwrap()
    }

    #[test]
    fn self_information_of_two_half_prob_tokens() {
        let s = from_logprobs(&[0.5f64.ln(), 0.5f64.ln()]);
        let info = self_information(&s).unwrap();
        assert!((info - 1.3862943611198906).abs() < 1e-12, "got {info}");
    }

    #[test]
    fn self_information_of_three_quarter_prob_tokens() {
        let s = from_logprobs(&[0.25f64.ln(); 3]);
        let info = self_information(&s).unwrap();
        assert!((info - 4.1588830833596715).abs() < 1e-12, "got {info}");
    }

    #[test]
    fn ratio_splits_evenly_when_conditioning_halves_surprisal() {
        let uncond = from_logprobs(&[-1.0, -1.0]);
        let cond = from_logprobs(&[-0.5, -0.5]);
        assert!((mutual_information(&uncond, &cond).unwrap() - 1.0).abs() < 1e-15);
        assert!((contribution_ratio(&uncond, &cond).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mismatched_tokens_are_rejected() {
        let uncond = from_logprobs(&[-1.0, -1.0]);
        let mut cond = from_logprobs(&[-0.5, -0.5]);
        cond.tokens[1] = "y".into();
        assert!(matches!(
            mutual_information(&uncond, &cond),
            Err(InfoError::ScoreMismatch(_))
        ));
        let short = from_logprobs(&[-0.5]);
        assert!(matches!(
            mutual_information(&uncond, &short),
            Err(InfoError::ScoreMismatch(_))
        ));
    }

    #[test]
    fn minimal_contribution_matches_hand_computation() {
        // 50 tokens at -2 nats each: I(y) = 100 exactly.
        let s = from_logprobs(&vec![-2.0; 50]);
        let got = minimal_contribution(&s, 0.65).unwrap();
        assert!((got - 0.7846085419537729).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn minimal_contribution_rejects_bad_thresholds() {
        let s = from_logprobs(&[-1.0]);
        for tau in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                minimal_contribution(&s, tau),
                Err(InfoError::InvalidThreshold(_))
            ));
        }
        // tau = 1 is allowed and pins the bound at exactly 1.
        assert_eq!(minimal_contribution(&s, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn zero_information_output_is_degenerate() {
        let s = from_logprobs(&[0.0, 0.0]);
        assert_eq!(
            minimal_contribution(&s, 0.65).unwrap_err(),
            InfoError::DegenerateOutput
        );
        let cond = from_logprobs(&[0.0, 0.0]);
        assert_eq!(
            contribution_ratio(&s, &cond).unwrap_err(),
            InfoError::DegenerateOutput
        );
    }

    #[test]
    fn plausibility_near_threshold() {
        // Geometric mean sqrt(0.7 * 0.6) = 0.6481 < 0.65.
        let s = from_logprobs(&[0.7f64.ln(), 0.6f64.ln()]);
        assert!(!plausibility_check(&s, 0.65).unwrap());
        // Both tokens at 0.7 clear the bar.
        let s = from_logprobs(&[0.7f64.ln(), 0.7f64.ln()]);
        assert!(plausibility_check(&s, 0.65).unwrap());
    }

    #[test]
    fn report_assembles_all_quantities() {
        let uncond = from_logprobs(&[-1.0, -1.0]);
        let cond = from_logprobs(&[-0.25, -0.25]);
        let report = build_report(&uncond, Some(&cond), Some(0.65)).unwrap();
        assert_eq!(report.token_count, 2);
        assert!((report.self_info - 2.0).abs() < 1e-15);
        assert!((report.cond_self_info.unwrap() - 0.5).abs() < 1e-15);
        assert!((report.phi.unwrap() - 0.75).abs() < 1e-15);
        let phi_min = report.phi_min.unwrap();
        assert!((phi_min - 0.5692170839075458).abs() < 1e-9, "got {phi_min}");
        // I(y|x) = 0.5 < -2 ln 0.65 = 0.8616, so the output is plausible.
        assert_eq!(report.plausible, Some(true));
    }

    #[test]
    fn report_without_conditioning_only_bounds() {
        let uncond = from_logprobs(&[-1.0, -1.0]);
        let report = build_report(&uncond, None, Some(0.65)).unwrap();
        assert!(report.phi.is_none());
        assert!(report.cond_self_info.is_none());
        assert!(report.phi_min.is_some());
        assert!(report.plausible.is_none());
    }

    #[test]
    fn report_rejects_cross_backend_scores() {
        let uncond = from_logprobs(&[-1.0]);
        let mut cond = from_logprobs(&[-0.5]);
        cond.scorer_id = "other".into();
        assert!(matches!(
            build_report(&uncond, Some(&cond), None),
            Err(InfoError::ScoreMismatch(_))
        ));
    }

    #[test]
    fn report_roundtrips_through_json() {
        let uncond = from_logprobs(&[-1.25, -0.75, -2.0]);
        let cond = from_logprobs(&[-0.5, -0.25, -1.0]);
        let report = build_report(&uncond, Some(&cond), Some(0.7)).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: ContributionReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
    }

    prop_compose! {
        fn arb_logprobs(max_len: usize)
            (v in proptest::collection::vec(-8.0f64..=-1e-6, 1..max_len)) -> Vec<f64> { v }
    }

    proptest! {
        #[test]
        fn phi_equals_one_minus_cond_over_uncond(
            u in arb_logprobs(50),
            scale in 0.01f64..1.0,
        ) {
            // Conditional = scaled-down surprisal over the same tokens.
            let c: Vec<f64> = u.iter().map(|lp| lp * scale).collect();
            let uncond = from_logprobs(&u);
            let cond = from_logprobs(&c);
            let phi = contribution_ratio(&uncond, &cond).unwrap();
            let iu = self_information(&uncond).unwrap();
            let ic = self_information(&cond).unwrap();
            let alt = 1.0 - ic / iu;
            prop_assert!((phi - alt).abs() <= 1e-12 * phi.abs().max(1.0));
            prop_assert!(phi <= 1.0);
        }

        #[test]
        fn phi_hat_is_monotone_in_tau(
            u in arb_logprobs(50),
            t1 in 0.05f64..0.5,
            dt in 1e-4f64..0.5,
        ) {
            let uncond = from_logprobs(&u);
            let lo = minimal_contribution(&uncond, t1).unwrap();
            let hi = minimal_contribution(&uncond, t1 + dt).unwrap();
            prop_assert!(lo < hi);
            prop_assert!(hi <= 1.0);
        }

        #[test]
        fn both_plausibility_formulations_agree(
            c in arb_logprobs(50),
            tau in 0.05f64..1.0,
        ) {
            let cond = from_logprobs(&c);
            let via_logs = plausibility_check(&cond, tau).unwrap();
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            let via_mean = mean.exp() > tau;
            prop_assert_eq!(via_logs, via_mean);
        }

        #[test]
        fn phi_hat_never_exceeds_phi_when_plausible(
            u in arb_logprobs(50),
            scale in 0.01f64..1.0,
            tau in 0.3f64..0.95,
        ) {
            let c: Vec<f64> = u.iter().map(|lp| lp * scale).collect();
            let uncond = from_logprobs(&u);
            let cond = from_logprobs(&c);
            if plausibility_check(&cond, tau).unwrap() {
                let phi = contribution_ratio(&uncond, &cond).unwrap();
                let bound = minimal_contribution(&uncond, tau).unwrap();
                prop_assert!(bound <= phi, "bound {} > phi {}", bound, phi);
            }
        }
    }
}
