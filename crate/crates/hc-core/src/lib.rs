//! Information accounting for human contribution in AI-assisted text.
//!
//! The core quantity is the contribution ratio φ = I(x; y) / I(y): the
//! share of an output's self-information that is explained by conditioning
//! on the human input, measured in nats under a fixed scoring backend.
//! Alongside the exact ratio, [`info::minimal_contribution`] computes the
//! threshold-based lower estimate that needs only unconditional scores.
//!
//! Modules:
//! - [`scores`]: validated per-token logprob containers.
//! - [`info`]: self-information, mutual information, φ, and reports.
//! - [`scorer`]: the scoring-backend trait and temperature transform.
//! - [`reflm`]: an exact, enumerable reference backend for offline work.
//! - [`corpus`]: generation records, prompt templates, JSONL persistence.
//! - [`harness`]: batch evaluation, summary statistics, verdict helpers.
//! - [`experiments`]: the built-in reproducible experiment suite.

pub mod corpus;
pub mod experiments;
pub mod harness;
pub mod info;
pub mod reflm;
pub mod scorer;
pub mod scores;

pub use info::{build_report, contribution_ratio, minimal_contribution, ContributionReport};
pub use reflm::{LmParams, ReferenceLm};
pub use scorer::{Scorer, ScoringRequest};
pub use scores::TokenScores;
