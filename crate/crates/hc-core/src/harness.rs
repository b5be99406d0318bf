//! Batch evaluation and the statistics behind the experiment suite.
//!
//! [`evaluate_batch`] scores every record twice (unconditionally and given
//! its `human_input`) and assembles contribution reports; per-record
//! failures are collected, never fatal, unless the whole batch fails. The
//! rest of the module turns report collections into box statistics, trend
//! verdicts, consistency fractions, and τ calibrations.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{chain_id, GenerationRecord, Mode, TEMPLATE_VERSION};
use crate::info::{build_report, ContributionReport};
use crate::scorer::{Scorer, ScoringRequest};

/// Default plausibility threshold.
pub const TAU_DEFAULT: f64 = 0.65;
/// The alternate threshold used for sensitivity checks.
pub const TAU_ALTERNATE: f64 = 0.7;
/// Default percentile for [`calibrate_tau`].
pub const CALIBRATION_PERCENTILE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("input must be nonempty")]
    EmptyInput,
    #[error("bad grouping: {0}")]
    InvalidGroups(String),
    #[error("no pairs exceed the gap threshold")]
    NoQualifyingPairs,
    #[error("chain {0} has missing or duplicated rounds")]
    ChainError(String),
    #[error("every record in the batch failed ({failed} failures)")]
    BatchFailed { failed: usize },
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("report {0} has no conditional score")]
    MissingConditional(String),
    #[error("percentile must lie in (0, 1), got {0}")]
    InvalidPercentile(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ── summary statistics ──────────────────────────────────────────────────

/// Box-plot statistics: median, Tukey-hinge quartiles, whiskers at the most
/// extreme points within 1.5·IQR of the hinges, and everything beyond them
/// as outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub lower_whisker: f64,
    pub upper_whisker: f64,
    pub outliers: Vec<f64>,
}

fn median_of(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

pub fn summarize(values: &[f64]) -> Result<BoxStats, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    let median = median_of(&sorted);
    // Tukey hinges: medians of the two halves, with the middle point
    // included in both halves when n is odd.
    let (lower, upper) = if n % 2 == 1 {
        (&sorted[..=n / 2], &sorted[n / 2..])
    } else {
        (&sorted[..n / 2], &sorted[n / 2..])
    };
    let q1 = median_of(lower);
    let q3 = median_of(upper);
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let mut outliers = Vec::new();
    let mut lower_whisker = f64::INFINITY;
    let mut upper_whisker = f64::NEG_INFINITY;
    for &v in &sorted {
        if v < lo_fence || v > hi_fence {
            outliers.push(v);
        } else {
            lower_whisker = lower_whisker.min(v);
            upper_whisker = upper_whisker.max(v);
        }
    }
    // The hinges themselves always sit inside the fences, so at least one
    // point is within them and the whiskers are well defined.
    Ok(BoxStats {
        count: n,
        median,
        q1,
        q3,
        lower_whisker,
        upper_whisker,
        outliers,
    })
}

// ── batch evaluation ────────────────────────────────────────────────────

/// One record's contribution report plus the grouping metadata the
/// experiment layer keys on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordReport {
    pub id: String,
    pub round: u32,
    pub mode: Mode,
    pub model_id: String,
    #[serde(flatten)]
    pub contribution: ContributionReport,
}

impl RecordReport {
    pub fn phi(&self) -> Result<f64, HarnessError> {
        self.contribution
            .phi
            .ok_or_else(|| HarnessError::MissingConditional(self.id.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub reports: Vec<RecordReport>,
    pub failures: Vec<BatchFailure>,
}

/// Score a batch at measurement temperature 1 with an empty null context.
pub fn evaluate_batch<S: Scorer + ?Sized>(
    records: &[GenerationRecord],
    scorer: &S,
    tau: Option<f64>,
) -> Result<BatchOutcome, HarnessError> {
    evaluate_batch_at(records, scorer, tau, 1.0, "")
}

/// Score a batch: for each record, the output is scored unconditionally
/// (against `null_context`, empty meaning no context at all) and
/// conditionally on the record's `human_input`, both under the given
/// measurement temperature. Per-record failures are collected; the batch
/// only errors when every record fails.
pub fn evaluate_batch_at<S: Scorer + ?Sized>(
    records: &[GenerationRecord],
    scorer: &S,
    tau: Option<f64>,
    temperature: f64,
    null_context: &str,
) -> Result<BatchOutcome, HarnessError> {
    let results: Vec<Result<RecordReport, BatchFailure>> = records
        .par_iter()
        .map(|record| {
            score_record(record, scorer, tau, temperature, null_context).map_err(|reason| {
                BatchFailure {
                    id: record.id.clone(),
                    reason,
                }
            })
        })
        .collect();
    let mut outcome = BatchOutcome::default();
    for r in results {
        match r {
            Ok(report) => outcome.reports.push(report),
            Err(failure) => outcome.failures.push(failure),
        }
    }
    if !records.is_empty() && outcome.reports.is_empty() {
        return Err(HarnessError::BatchFailed {
            failed: outcome.failures.len(),
        });
    }
    Ok(outcome)
}

fn score_record<S: Scorer + ?Sized>(
    record: &GenerationRecord,
    scorer: &S,
    tau: Option<f64>,
    temperature: f64,
    null_context: &str,
) -> Result<RecordReport, String> {
    record.validate().map_err(|e| e.to_string())?;
    let mut uncond_req = ScoringRequest::new(&record.output)
        .and_then(|r| r.with_temperature(temperature))
        .map_err(|e| e.to_string())?;
    if !null_context.is_empty() {
        uncond_req = uncond_req.with_context(null_context);
    }
    let cond_req = ScoringRequest::new(&record.output)
        .and_then(|r| r.with_temperature(temperature))
        .map_err(|e| e.to_string())?
        .with_context(&record.human_input);
    let uncond = scorer.score(&uncond_req).map_err(|e| e.to_string())?;
    let cond = scorer.score(&cond_req).map_err(|e| e.to_string())?;
    let contribution = build_report(&uncond, Some(&cond), tau).map_err(|e| e.to_string())?;
    Ok(RecordReport {
        id: record.id.clone(),
        round: record.round,
        mode: record.mode,
        model_id: record.model_id.clone(),
        contribution,
    })
}

// ── trend and consistency machinery ─────────────────────────────────────

/// Outcome of a strict-ordering check over group medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdict {
    /// True iff medians are strictly decreasing in the given group order.
    pub decreasing: bool,
    /// Minimum adjacent median gap (negative when the order is violated).
    pub margin: f64,
    pub medians: Vec<(String, f64)>,
}

/// Check that group medians strictly decrease in the given order.
pub fn ordering_trend(groups: &[(String, Vec<f64>)]) -> Result<TrendVerdict, HarnessError> {
    if groups.len() < 2 {
        return Err(HarnessError::InvalidGroups(
            "need at least two groups".into(),
        ));
    }
    let mut medians = Vec::with_capacity(groups.len());
    for (label, values) in groups {
        if values.is_empty() {
            return Err(HarnessError::InvalidGroups(format!("group {label} is empty")));
        }
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        medians.push((label.clone(), median_of(&sorted)));
    }
    let margin = medians
        .windows(2)
        .map(|w| w[0].1 - w[1].1)
        .fold(f64::INFINITY, f64::min);
    Ok(TrendVerdict {
        decreasing: margin > 0.0,
        margin,
        medians,
    })
}

/// Tally of ordering agreement among qualifying pairs; fractions from
/// several pairings can be pooled by merging tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub matching: usize,
    pub qualifying: usize,
}

impl Consistency {
    pub fn fraction(&self) -> f64 {
        self.matching as f64 / self.qualifying as f64
    }

    pub fn merge(&mut self, other: Consistency) {
        self.matching += other.matching;
        self.qualifying += other.qualifying;
    }
}

/// Among positionally paired reports with |φ_a − φ_b| > `gap_threshold`,
/// how often the ordering matches `expected` (`Greater` means group a is
/// expected to measure higher).
pub fn pairwise_consistency(
    a: &[RecordReport],
    b: &[RecordReport],
    expected: Ordering,
    gap_threshold: f64,
) -> Result<Consistency, HarnessError> {
    if a.len() != b.len() {
        return Err(HarnessError::InvalidGroups(format!(
            "paired groups differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if expected == Ordering::Equal {
        return Err(HarnessError::InvalidGroups(
            "expected order must be Greater or Less".into(),
        ));
    }
    let mut qualifying = 0usize;
    let mut matching = 0usize;
    for (ra, rb) in a.iter().zip(b) {
        let (pa, pb) = (ra.phi()?, rb.phi()?);
        if (pa - pb).abs() > gap_threshold {
            qualifying += 1;
            let observed = if pa > pb {
                Ordering::Greater
            } else {
                Ordering::Less
            };
            if observed == expected {
                matching += 1;
            }
        }
    }
    if qualifying == 0 {
        return Err(HarnessError::NoQualifyingPairs);
    }
    Ok(Consistency {
        matching,
        qualifying,
    })
}

/// Fraction of chains whose φ dropped across each round transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTransition {
    pub from_round: u32,
    pub to_round: u32,
    pub chains: usize,
    pub fraction_reduced: f64,
}

/// Group reports by chain id (record id with any `#r<n>` suffix removed)
/// and compute, per round transition, the fraction of chains with
/// φ_{r+1} < φ_r. Every chain must have consecutive rounds starting at 1.
pub fn multi_round_reduction(
    reports: &[RecordReport],
) -> Result<Vec<RoundTransition>, HarnessError> {
    if reports.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let mut chains: BTreeMap<&str, BTreeMap<u32, f64>> = BTreeMap::new();
    for r in reports {
        let phi = r.phi()?;
        let chain = chains.entry(chain_id(&r.id)).or_default();
        if chain.insert(r.round, phi).is_some() {
            return Err(HarnessError::ChainError(chain_id(&r.id).to_string()));
        }
    }
    let mut max_round = 1;
    for (id, rounds) in &chains {
        let last = *rounds.keys().last().expect("nonempty chain");
        if rounds.len() as u32 != last || !rounds.contains_key(&1) {
            return Err(HarnessError::ChainError(id.to_string()));
        }
        max_round = max_round.max(last);
    }
    let mut transitions = Vec::new();
    for from in 1..max_round {
        let to = from + 1;
        let mut n = 0usize;
        let mut reduced = 0usize;
        for rounds in chains.values() {
            if let (Some(&a), Some(&b)) = (rounds.get(&from), rounds.get(&to)) {
                n += 1;
                if b < a {
                    reduced += 1;
                }
            }
        }
        if n > 0 {
            transitions.push(RoundTransition {
                from_round: from,
                to_round: to,
                chains: n,
                fraction_reduced: reduced as f64 / n as f64,
            });
        }
    }
    Ok(transitions)
}

// ── τ calibration ───────────────────────────────────────────────────────

/// Per-record geometric mean of conditional token probabilities,
/// exp(−I(y|x)/N).
pub fn geometric_mean_prob(report: &ContributionReport) -> Option<f64> {
    let cond = report.cond_self_info?;
    Some((-cond / report.token_count as f64).exp())
}

/// Pick τ as a percentile of the per-record geometric-mean conditional
/// token probability over a calibration set of known-plausible records,
/// with linear interpolation between order statistics.
pub fn calibrate_tau(
    reports: &[&ContributionReport],
    percentile: f64,
) -> Result<f64, HarnessError> {
    if reports.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(HarnessError::InvalidPercentile(percentile));
    }
    let mut means = Vec::with_capacity(reports.len());
    for r in reports {
        means.push(
            geometric_mean_prob(r)
                .ok_or_else(|| HarnessError::MissingConditional(r.scorer_id.clone()))?,
        );
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let rank = percentile * (means.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    Ok(if lo + 1 < means.len() {
        means[lo] + frac * (means[lo + 1] - means[lo])
    } else {
        means[lo]
    })
}

// ── experiment results ──────────────────────────────────────────────────

/// Settings stamped into every experiment result; numbers from results
/// with different stamps are not directly comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMeta {
    pub experiment: String,
    pub scorer_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau: Option<f64>,
    pub template_version: String,
    pub null_context: String,
    pub seed: u64,
    /// Measurement temperature, when uniform across the result. The
    /// temperature sweep stores per-group temperatures in the labels.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub temperature: Option<f64>,
}

impl ExperimentMeta {
    pub fn new(experiment: impl Into<String>, scorer_id: impl Into<String>, seed: u64) -> Self {
        Self {
            experiment: experiment.into(),
            scorer_id: scorer_id.into(),
            tau: None,
            template_version: TEMPLATE_VERSION.to_string(),
            null_context: String::new(),
            seed,
            temperature: Some(1.0),
        }
    }
}

/// Flags raised when two results' numbers are about to be compared even
/// though their measurement settings differ.
pub fn comparability_warnings(a: &ExperimentMeta, b: &ExperimentMeta) -> Vec<String> {
    let mut warnings = Vec::new();
    if a.null_context != b.null_context {
        warnings.push("null-context-mismatch".to_string());
    }
    if a.scorer_id != b.scorer_id {
        warnings.push("scorer-mismatch".to_string());
    }
    if a.template_version != b.template_version {
        warnings.push("template-version-mismatch".to_string());
    }
    if a.temperature != b.temperature {
        warnings.push("temperature-mismatch".to_string());
    }
    warnings
}

/// A finished experiment: per-group box statistics, every per-record
/// report, per-record failures, and the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub meta: ExperimentMeta,
    pub groups: BTreeMap<String, BoxStats>,
    pub reports: Vec<RecordReport>,
    pub failures: Vec<BatchFailure>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ExperimentResult {
    pub fn new(
        meta: ExperimentMeta,
        groups: BTreeMap<String, BoxStats>,
        reports: Vec<RecordReport>,
        failures: Vec<BatchFailure>,
    ) -> Result<Self, HarnessError> {
        let mut seen = std::collections::HashSet::new();
        for r in &reports {
            if !seen.insert(r.id.as_str()) {
                return Err(HarnessError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            meta,
            groups,
            reports,
            failures,
            warnings: Vec::new(),
        })
    }

    /// Per-group box statistics as CSV for plotting.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("group,count,median,q1,q3,lower_whisker,upper_whisker\n");
        for (label, s) in &self.groups {
            out.push_str(&format!(
                "{label},{},{},{},{},{},{}\n",
                s.count, s.median, s.q1, s.q3, s.lower_whisker, s.upper_whisker
            ));
        }
        out
    }
}

/// Group report φ values by an arbitrary key, preserving key order.
pub fn group_phi<F>(reports: &[RecordReport], key: F) -> Result<BTreeMap<String, Vec<f64>>, HarnessError>
where
    F: Fn(&RecordReport) -> String,
{
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        groups.entry(key(r)).or_default().push(r.phi()?);
    }
    Ok(groups)
}

/// Write reports as JSONL (one report per line, full float precision).
pub fn write_reports(path: &Path, reports: &[RecordReport]) -> Result<(), HarnessError> {
    let mut out = std::fs::File::create(path)?;
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Write an experiment result as a single pretty-printed JSON document.
pub fn write_result(path: &Path, result: &ExperimentResult) -> Result<(), HarnessError> {
    let mut out = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut out, result)?;
    out.write_all(b"\n")?;
    Ok(())
}

// ── surrogate scoring grid ──────────────────────────────────────────────

/// One (scorer × generator) cell of the surrogate robustness grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateCell {
    pub scorer_id: String,
    pub generator_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub result: Option<ExperimentResult>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trend: Option<TrendVerdict>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Score every generator's records with every scorer. Each cell groups φ
/// by generation mode and carries the strict-ordering verdict over those
/// groups. Cell-level failures land in the cell, not the grid.
pub fn surrogate_matrix<S: Scorer + ?Sized>(
    generations: &[(String, Vec<GenerationRecord>)],
    scorers: &[&S],
    tau: Option<f64>,
    seed: u64,
) -> Vec<SurrogateCell> {
    let mut cells = Vec::with_capacity(generations.len() * scorers.len());
    for scorer in scorers {
        for (generator_id, records) in generations {
            let mut cell = SurrogateCell {
                scorer_id: scorer.id(),
                generator_id: generator_id.clone(),
                result: None,
                trend: None,
                error: None,
            };
            match surrogate_cell(records, *scorer, tau, seed, generator_id) {
                Ok((result, trend)) => {
                    cell.result = Some(result);
                    cell.trend = Some(trend);
                }
                Err(e) => cell.error = Some(e.to_string()),
            }
            cells.push(cell);
        }
    }
    cells
}

fn surrogate_cell<S: Scorer + ?Sized>(
    records: &[GenerationRecord],
    scorer: &S,
    tau: Option<f64>,
    seed: u64,
    generator_id: &str,
) -> Result<(ExperimentResult, TrendVerdict), HarnessError> {
    let outcome = evaluate_batch(records, scorer, tau)?;
    let groups = group_phi(&outcome.reports, |r| r.mode.to_string())?;
    let ordered: Vec<(String, Vec<f64>)> = groups.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let trend = ordering_trend(&ordered)?;
    let mut stats = BTreeMap::new();
    for (label, values) in &groups {
        stats.insert(label.clone(), summarize(values)?);
    }
    let mut meta = ExperimentMeta::new(format!("surrogate:{generator_id}"), scorer.id(), seed);
    meta.tau = tau;
    let result = ExperimentResult::new(meta, stats, outcome.reports, outcome.failures)?;
    Ok((result, trend))
}
