//! The built-in, fully offline experiment suite.
//!
//! Every experiment here runs against the exact reference model on a
//! synthetic pseudo-word corpus, so results are reproducible bit for bit
//! from a seed. The designs hold the irrelevant factors fixed and vary one
//! axis each:
//!
//! - `levels`: one output scored under three conditioning levels — the
//!   full text, half of its words, a single keyword.
//! - `length`: a fixed conditioning input against outputs of growing
//!   length.
//! - `temperature`: fixed records rescored under a sweep of measurement
//!   temperatures.
//! - `attacks`: prompt suffixes appended to the conditioning input.
//! - `rounds`: three-round refinement chains whose outputs echo a decaying
//!   share of the cumulative transcript.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{
    build_prompt, make_refinement_record, Attack, CorpusError, Domain, GenerationRecord,
    InfoLevels, Mode, REFINEMENT_INSTRUCTION,
};
use crate::harness::{
    evaluate_batch, evaluate_batch_at, ordering_trend, pairwise_consistency, summarize,
    BatchOutcome, Consistency, ExperimentMeta, ExperimentResult, HarnessError, RecordReport,
};
use crate::reflm::{tokenize, LmParams, ReferenceLm};
use crate::scorer::{ScoreError, Scorer};

/// Model parameters for the experiment suite. The copy weight is high so
/// that conditioning leaves a clear signature; measurements themselves work
/// at any valid parameters.
pub const EXPERIMENT_LM_PARAMS: LmParams = LmParams {
    laplace_alpha: 1.0,
    copy_lambda: 0.8,
    copy_alpha: 1.0,
};

/// Default generation-side sampling temperature.
pub const GENERATION_TEMPERATURE: f64 = 0.7;
/// Measurement temperatures swept by the temperature experiment.
pub const TEMPERATURE_SWEEP: [f64; 4] = [0.3, 0.5, 0.7, 0.9];
/// Output lengths swept by the length experiment.
pub const LENGTH_SWEEP: [usize; 3] = [100, 200, 400];
/// Minimum adjacent median gap the levels trend must clear.
pub const LEVELS_MIN_GAP: f64 = 0.02;
/// Gap below which a pair of φ values is too close to count for
/// consistency checks.
pub const CONSISTENCY_GAP_THRESHOLD: f64 = 0.1;
/// Required agreement between measured and construction ordering.
pub const CONSISTENCY_MIN: f64 = 0.95;
/// Largest tolerated attack-induced shift of the median.
pub const ATTACK_MAX_SHIFT: f64 = 0.05;
/// Required per-transition fraction of chains with reduced φ.
pub const ROUNDS_MIN_FRACTION: f64 = 0.8;
/// Required round-wise rank preservation across generation modes.
pub const ROUNDS_RANK_MIN: f64 = 0.8;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment arguments: {0}")]
    InvalidArgs(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Levels,
    Length,
    Temperature,
    Rounds,
    Attacks,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Levels,
        Experiment::Length,
        Experiment::Temperature,
        Experiment::Rounds,
        Experiment::Attacks,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::Levels => "levels",
            Experiment::Length => "length",
            Experiment::Temperature => "temperature",
            Experiment::Rounds => "rounds",
            Experiment::Attacks => "attacks",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "levels" => Ok(Experiment::Levels),
            "length" => Ok(Experiment::Length),
            "temperature" => Ok(Experiment::Temperature),
            "rounds" => Ok(Experiment::Rounds),
            "attacks" => Ok(Experiment::Attacks),
            other => Err(ExperimentError::InvalidArgs(format!(
                "unknown experiment {other}; expected one of levels, length, temperature, rounds, attacks"
            ))),
        }
    }
}

/// One named pass/fail check an experiment reports about its own output.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub result: ExperimentResult,
    pub verdicts: Vec<Verdict>,
}

/// A shuffled corpus of `count` distinct pseudo-words starting at index
/// `start`: `w0000 w0001 …`, each exactly once, in seeded random order.
/// Every next-token law over it is near-uniform, which keeps the
/// experiments' information denominators stable.
pub fn synthetic_corpus_range(start: usize, count: usize, seed: u64) -> String {
    let mut words: Vec<String> = (start..start + count).map(|i| format!("w{i:04}")).collect();
    words.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    words.join(" ")
}

/// `synthetic_corpus_range` starting at word 0.
pub fn synthetic_corpus(count: usize, seed: u64) -> String {
    synthetic_corpus_range(0, count, seed)
}

/// Build the reference model used by the experiment suite.
pub fn experiment_lm(corpus: &str) -> Result<ReferenceLm, ScoreError> {
    ReferenceLm::from_corpus(corpus, EXPERIMENT_LM_PARAMS)
}

pub fn run_experiment(
    experiment: Experiment,
    lm: &ReferenceLm,
    n: usize,
    seed: u64,
    tau: Option<f64>,
) -> Result<ExperimentOutcome, ExperimentError> {
    if n == 0 {
        return Err(ExperimentError::InvalidArgs(
            "need at least one record per group".into(),
        ));
    }
    match experiment {
        Experiment::Levels => run_levels(lm, n, seed, tau),
        Experiment::Length => run_length(lm, n, seed, tau),
        Experiment::Temperature => run_temperature(lm, n, seed, tau),
        Experiment::Rounds => run_rounds(lm, n, seed, tau),
        Experiment::Attacks => run_attacks(lm, n, seed, tau),
    }
}

// ── shared construction helpers ─────────────────────────────────────────

/// Words available for synthesis: the model vocabulary minus the reserved
/// unknown slot.
fn content_words(lm: &ReferenceLm) -> &[String] {
    &lm.vocab()[1..]
}

fn sample_words<'a>(lm: &'a ReferenceLm, k: usize, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    content_words(lm)
        .choose_multiple(rng, k)
        .map(|s| s.as_str())
        .collect()
}

/// `distinct` sampled words, `reps` occurrences each, shuffled together.
/// The repeats give conditioning a strong copy signature while keeping the
/// unconditional law flat, since the order carries no corpus bigrams.
fn shuffled_bag<'a>(
    lm: &'a ReferenceLm,
    distinct: usize,
    reps: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<&'a str>, Vec<&'a str>) {
    let words = sample_words(lm, distinct, rng);
    let mut occurrences: Vec<&str> = words
        .iter()
        .flat_map(|w| std::iter::repeat(*w).take(reps))
        .collect();
    occurrences.shuffle(rng);
    (words, occurrences)
}

fn base_record(id: String, mode: Mode, human_input: String, output: String, lm: &ReferenceLm) -> GenerationRecord {
    GenerationRecord {
        id,
        domain: Domain::Other,
        mode,
        human_input,
        output,
        model_id: lm.id(),
        round: 1,
        temperature: GENERATION_TEMPERATURE,
        length_target: None,
        attack: None,
        extra: BTreeMap::new(),
    }
}

/// Finish an experiment: group φ by label, summarize, and assemble the
/// result document.
fn finish(
    experiment: &str,
    lm: &ReferenceLm,
    seed: u64,
    tau: Option<f64>,
    temperature: Option<f64>,
    outcome: BatchOutcome,
    label_of: &HashMap<String, String>,
) -> Result<(ExperimentResult, BTreeMap<String, Vec<f64>>), ExperimentError> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for report in &outcome.reports {
        let label = label_of
            .get(&report.id)
            .ok_or_else(|| HarnessError::InvalidGroups(format!("unlabeled report {}", report.id)))?;
        groups.entry(label.clone()).or_default().push(report.phi()?);
    }
    let mut stats = BTreeMap::new();
    for (label, values) in &groups {
        stats.insert(label.clone(), summarize(values)?);
    }
    let mut meta = ExperimentMeta::new(experiment, lm.id(), seed);
    meta.tau = tau;
    meta.temperature = temperature;
    let result = ExperimentResult::new(meta, stats, outcome.reports, outcome.failures)?;
    Ok((result, groups))
}

fn medians_detail(result: &ExperimentResult) -> String {
    result
        .groups
        .iter()
        .map(|(label, s)| format!("{label}: median {:.4}", s.median))
        .collect::<Vec<_>>()
        .join(", ")
}

// ── levels ──────────────────────────────────────────────────────────────

/// Per index i, one synthetic output (20 distinct words, 5 occurrences
/// each, shuffled) scored under three conditioning levels: the full text
/// (polish), a random half of its word occurrences (summary), and its
/// first sampled word as a keyword (title). Group labels are the modes,
/// whose alphabetical order matches descending conditioning information.
pub fn levels_records(
    lm: &ReferenceLm,
    n: usize,
    seed: u64,
) -> Result<Vec<GenerationRecord>, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(3 * n);
    for i in 0..n {
        let (distinct, occurrences) = shuffled_bag(lm, 20, 5, &mut rng);
        let output = occurrences.join(" ");

        let mut half: Vec<&str> = occurrences.clone();
        half.shuffle(&mut rng);
        half.truncate(occurrences.len() / 2);
        let keyword = distinct[0];

        let full_prompt = build_prompt(
            Mode::Polish,
            &InfoLevels {
                content: output.clone(),
                ..Default::default()
            },
            None,
            None,
        )?;
        let half_prompt = build_prompt(
            Mode::Summary,
            &InfoLevels {
                content: output.clone(),
                summary: Some(half.join(" ")),
                ..Default::default()
            },
            None,
            None,
        )?;
        let keyword_prompt = build_prompt(
            Mode::Title,
            &InfoLevels {
                content: output.clone(),
                title: Some(keyword.to_string()),
                ..Default::default()
            },
            None,
            None,
        )?;
        records.push(base_record(
            format!("lv{i:03}-polish"),
            Mode::Polish,
            full_prompt,
            output.clone(),
            lm,
        ));
        records.push(base_record(
            format!("lv{i:03}-summary"),
            Mode::Summary,
            half_prompt,
            output.clone(),
            lm,
        ));
        records.push(base_record(
            format!("lv{i:03}-title"),
            Mode::Title,
            keyword_prompt,
            output,
            lm,
        ));
    }
    Ok(records)
}

fn run_levels(
    lm: &ReferenceLm,
    n: usize,
    seed: u64,
    tau: Option<f64>,
) -> Result<ExperimentOutcome, ExperimentError> {
    let records = levels_records(lm, n, seed)?;
    let label_of: HashMap<String, String> = records
        .iter()
        .map(|r| (r.id.clone(), r.mode.to_string()))
        .collect();
    let outcome = evaluate_batch(&records, lm, tau)?;
    let (result, groups) = finish("levels", lm, seed, tau, Some(1.0), outcome, &label_of)?;

    let ordered: Vec<(String, Vec<f64>)> =
        groups.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let trend = ordering_trend(&ordered)?;
    let mut verdicts = vec![Verdict {
        name: "levels-ordering".into(),
        pass: trend.decreasing && trend.margin >= LEVELS_MIN_GAP,
        detail: format!(
            "{}; min adjacent gap {:.4} (needs ≥ {LEVELS_MIN_GAP})",
            medians_detail(&result),
            trend.margin
        ),
    }];

    let consistency = levels_consistency(&result.reports, CONSISTENCY_GAP_THRESHOLD)?;
    verdicts.push(Verdict {
        name: "pairwise-consistency".into(),
        pass: consistency.fraction() >= CONSISTENCY_MIN,
        detail: format!(
            "{}/{} qualifying pairs ordered as constructed ({:.4}, needs ≥ {CONSISTENCY_MIN})",
            consistency.matching,
            consistency.qualifying,
            consistency.fraction()
        ),
    });
    Ok(ExperimentOutcome { result, verdicts })
}

/// Pool ordering consistency over every ordered pair of conditioning
/// levels, pairing reports that share a record index.
pub fn levels_consistency(
    reports: &[RecordReport],
    gap_threshold: f64,
) -> Result<Consistency, ExperimentError> {
    let by_mode = |mode: Mode| -> Vec<RecordReport> {
        reports
            .iter()
            .filter(|r| r.mode == mode)
            .cloned()
            .collect()
    };
    let polish = by_mode(Mode::Polish);
    let summary = by_mode(Mode::Summary);
    let title = by_mode(Mode::Title);
    let mut pooled = Consistency::default();
    for (hi, lo) in [(&polish, &summary), (&polish, &title), (&summary, &title)] {
        match pairwise_consistency(hi, lo, Ordering::Greater, gap_threshold) {
            Ok(c) => pooled.merge(c),
            Err(HarnessError::NoQualifyingPairs) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if pooled.qualifying == 0 {
        return Err(ExperimentError::Harness(HarnessError::NoQualifyingPairs));
    }
    Ok(pooled)
}

// ── length ──────────────────────────────────────────────────────────────

/// Per index i, a fixed 40-word conditioning input; outputs of each swept
/// length open with those 40 words shuffled and continue with fresh
/// unconditional samples. Longer outputs dilute the same human signal.
pub fn length_records(
    lm: &ReferenceLm,
    n: usize,
    seed: u64,
) -> Result<Vec<GenerationRecord>, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n * LENGTH_SWEEP.len());
    for i in 0..n {
        let input_words = sample_words(lm, 40, &mut rng);
        let input_text = input_words.join(" ");
        for target in LENGTH_SWEEP {
            let mut opening = input_words.clone();
            opening.shuffle(&mut rng);
            let continuation =
                lm.sample(None, target - opening.len(), GENERATION_TEMPERATURE, rng.gen())?;
            let output = format!("{} {}", opening.join(" "), continuation);
            let prompt = build_prompt(
                Mode::Title,
                &InfoLevels {
                    content: input_text.clone(),
                    title: Some(input_text.clone()),
                    ..Default::default()
                },
                None,
                Some(target as u32),
            )?;
            let mut record = base_record(
                format!("len{i:03}-n{target}"),
                Mode::Title,
                prompt,
                output,
                lm,
            );
            record.length_target = Some(target as u32);
            records.push(record);
        }
    }
    Ok(records)
}

fn length_label(target: usize) -> String {
    format!("n{target:03}")
}

fn run_length(
    lm: &ReferenceLm,
    n: usize,
    seed: u64,
    tau: Option<f64>,
) -> Result<ExperimentOutcome, ExperimentError> {
    let records = length_records(lm, n, seed)?;
    let label_of: HashMap<String, String> = records
        .iter()
        .map(|r| {
            (
                r.id.clone(),
                length_label(r.length_target.unwrap_or(0) as usize),
            )
        })
        .collect();
    let outcome = evaluate_batch(&records, lm, tau)?;
    let (result, groups) = finish("length", lm, seed, tau, Some(1.0), outcome, &label_of)?;
    let ordered: Vec<(String, Vec<f64>)> =
        groups.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let trend = ordering_trend(&ordered)?;
    let verdicts = vec![Verdict {
        name: "length-ordering".into(),
        pass: trend.decreasing,
        detail: format!(
            "{}; strictly decreasing: {}",
            medians_detail(&result),
            trend.decreasing
        ),
    }];
    Ok(ExperimentOutcome { result, verdicts })
}

// ── temperature ─────────────────────────────────────────────────────────

/// Per index i, one shuffled word-bag output conditioned on its own full
/// text. The bag keeps the unconditional law flat on the output, so the
/// sweep isolates how measurement temperature erodes the copy signature.
/// The records are fixed; the sweep rescores them at each temperature.
pub fn temperature_records(
    lm: &ReferenceLm,
    n: usize,
    seed: u64,
) -> Result<Vec<GenerationRecord>, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let (_, occurrences) = shuffled_bag(lm, 20, 5, &mut rng);
        let output = occurrences.join(" ");
        let prompt = build_prompt(
            Mode::Polish,
            &InfoLevels {
                content: output.clone(),
                ..Default::default()
            },
            None,
            None,
        )?;
        records.push(base_record(
            format!("tmp{i:03}"),
            Mode::Polish,
            prompt,
            output,
            lm,
        ));
    }
    Ok(records)
}

fn temperature_label(t: f64) -> String {
    format!("t{t:.1}")
}

fn run_temperature(
    lm: &ReferenceLm,
    n: usize,
    seed: u64,
    tau: Option<f64>,
) -> Result<ExperimentOutcome, ExperimentError> {
    let base = temperature_records(lm, n, seed)?;
    let mut merged = BatchOutcome::default();
    let mut label_of = HashMap::new();
    for t in TEMPERATURE_SWEEP {
        let label = temperature_label(t);
        let mut records = base.clone();
        for r in &mut records {
            r.id = format!("{}@{label}", r.id);
        }
        for r in &records {
            label_of.insert(r.id.clone(), label.clone());
        }
        let outcome = evaluate_batch_at(&records, lm, tau, t, "")?;
        merged.reports.extend(outcome.reports);
        merged.failures.extend(outcome.failures);
    }
    // Per-group measurement temperatures live in the labels.
    let (result, groups) = finish("temperature", lm, seed, tau, None, merged, &label_of)?;

    let medians: Vec<f64> = groups
        .values()
        .map(|vs| {
            let mut s = vs.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if s.len() % 2 == 1 {
                s[s.len() / 2]
            } else {
                0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2])
            }
        })
        .collect();
    let non_increasing = medians.windows(2).all(|w| w[1] <= w[0]);
    let extremes_strict = medians.last().unwrap() < medians.first().unwrap();
    let verdicts = vec![
        Verdict {
            name: "temperature-non-increasing".into(),
            pass: non_increasing,
            detail: medians_detail(&result),
        },
        Verdict {
            name: "temperature-extremes".into(),
            pass: extremes_strict,
            detail: format!(
                "median at t{:.1} = {:.4} vs t{:.1} = {:.4}",
                TEMPERATURE_SWEEP[TEMPERATURE_SWEEP.len() - 1],
                medians.last().unwrap(),
                TEMPERATURE_SWEEP[0],
                medians.first().unwrap()
            ),
        },
    ];
    Ok(ExperimentOutcome { result, verdicts })
}

// ── attacks ─────────────────────────────────────────────────────────────

/// Summary-level records plus two variants whose prompts carry the attack
/// suffixes. Outputs are identical across the three variants of an index.
pub fn attack_records(
    lm: &ReferenceLm,
    n: usize,
    seed: u64,
) -> Result<Vec<GenerationRecord>, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(3 * n);
    for i in 0..n {
        let (_, occurrences) = shuffled_bag(lm, 20, 5, &mut rng);
        let output = occurrences.join(" ");
        let mut half = occurrences.clone();
        half.shuffle(&mut rng);
        half.truncate(occurrences.len() / 2);
        let levels = InfoLevels {
            content: output.clone(),
            summary: Some(half.join(" ")),
            ..Default::default()
        };
        for attack in [Attack::None, Attack::RareWords, Attack::MimicHuman] {
            let prompt = build_prompt(Mode::Summary, &levels, Some(attack), None)?;
            let suffix = match attack {
                Attack::None => "base".to_string(),
                other => other.to_string(),
            };
            let mut record = base_record(
                format!("atk{i:03}-{suffix}"),
                Mode::Summary,
                prompt,
                output.clone(),
                lm,
            );
            record.attack = Some(attack);
            records.push(record);
        }
    }
    Ok(records)
}

fn run_attacks(
    lm: &ReferenceLm,
    n: usize,
    seed: u64,
    tau: Option<f64>,
) -> Result<ExperimentOutcome, ExperimentError> {
    let records = attack_records(lm, n, seed)?;
    let label_of: HashMap<String, String> = records
        .iter()
        .map(|r| {
            let label = match r.attack {
                Some(Attack::None) | None => "base".to_string(),
                Some(other) => other.to_string(),
            };
            (r.id.clone(), label)
        })
        .collect();
    let outcome = evaluate_batch(&records, lm, tau)?;
    let (result, _) = finish("attacks", lm, seed, tau, Some(1.0), outcome, &label_of)?;

    let base_median = result.groups["base"].median;
    let mut worst: (String, f64) = ("none".into(), 0.0);
    for kind in [Attack::RareWords, Attack::MimicHuman] {
        let shift = (result.groups[kind.as_str()].median - base_median).abs();
        if shift > worst.1 {
            worst = (kind.to_string(), shift);
        }
    }
    let verdicts = vec![Verdict {
        name: "attack-neutrality".into(),
        pass: worst.1 <= ATTACK_MAX_SHIFT,
        detail: format!(
            "{}; largest shift {:.4} ({}) vs budget {ATTACK_MAX_SHIFT}",
            medians_detail(&result),
            worst.1,
            worst.0
        ),
    }];
    Ok(ExperimentOutcome { result, verdicts })
}

// ── rounds ──────────────────────────────────────────────────────────────

/// Echo share of the first round per mode; later rounds decay it.
const ROUND_SHARES: [(Mode, f64); 3] = [
    (Mode::Polish, 0.95),
    (Mode::Summary, 0.5),
    (Mode::Title, 0.1),
];
const ROUND_SHARE_DECAY: f64 = 0.55;
const ROUND_OUTPUT_LEN: usize = 80;
const ROUND_COUNT: u32 = 3;

/// Compose an output that echoes the transcript: each position copies a
/// uniformly chosen transcript token with probability `share`, otherwise
/// takes the next token of a fresh unconditional sample.
fn echo_output(
    lm: &ReferenceLm,
    transcript: &str,
    share: f64,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<String, ExperimentError> {
    let pool = tokenize(transcript);
    let fresh_text = lm.sample(None, len, GENERATION_TEMPERATURE, rng.gen())?;
    let fresh = tokenize(&fresh_text);
    let mut words = Vec::with_capacity(len);
    for j in 0..len {
        if rng.gen::<f64>() < share && !pool.is_empty() {
            words.push(pool[rng.gen_range(0..pool.len())].clone());
        } else {
            words.push(fresh[j].clone());
        }
    }
    Ok(words.join(" "))
}

/// `n` three-round refinement chains, modes assigned round-robin. Round 1
/// conditions on a mode-sized prompt; each later round conditions on the
/// cumulative transcript while its output echoes a decayed share of it.
pub fn round_records(
    lm: &ReferenceLm,
    n: usize,
    seed: u64,
) -> Result<Vec<GenerationRecord>, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n * ROUND_COUNT as usize);
    for i in 0..n {
        let (mode, base_share) = ROUND_SHARES[i % ROUND_SHARES.len()];
        let prompt = match mode {
            Mode::Polish => build_prompt(
                Mode::Polish,
                &InfoLevels {
                    content: sample_words(lm, 80, &mut rng).join(" "),
                    ..Default::default()
                },
                None,
                None,
            )?,
            Mode::Summary => build_prompt(
                Mode::Summary,
                &InfoLevels {
                    content: "synthetic".into(),
                    summary: Some(sample_words(lm, 40, &mut rng).join(" ")),
                    ..Default::default()
                },
                None,
                None,
            )?,
            _ => build_prompt(
                Mode::Title,
                &InfoLevels {
                    content: "synthetic".into(),
                    title: Some(sample_words(lm, 5, &mut rng).join(" ")),
                    ..Default::default()
                },
                None,
                None,
            )?,
        };
        let output = echo_output(lm, &prompt, base_share, ROUND_OUTPUT_LEN, &mut rng)?;
        let mut prev = base_record(format!("rnd{i:03}"), mode, prompt, output, lm);
        records.push(prev.clone());
        for round in 2..=ROUND_COUNT {
            let share = base_share * ROUND_SHARE_DECAY.powi(round as i32 - 1);
            let transcript = format!(
                "{}\n\n{}\n\n{}",
                prev.human_input, prev.output, REFINEMENT_INSTRUCTION
            );
            let output = echo_output(lm, &transcript, share, ROUND_OUTPUT_LEN, &mut rng)?;
            let record = make_refinement_record(&prev, &output, REFINEMENT_INSTRUCTION)?;
            debug_assert_eq!(record.human_input, transcript);
            records.push(record.clone());
            prev = record;
        }
    }
    Ok(records)
}

fn run_rounds(
    lm: &ReferenceLm,
    n: usize,
    seed: u64,
    tau: Option<f64>,
) -> Result<ExperimentOutcome, ExperimentError> {
    let records = round_records(lm, n, seed)?;
    let label_of: HashMap<String, String> = records
        .iter()
        .map(|r| (r.id.clone(), format!("round{}", r.round)))
        .collect();
    let outcome = evaluate_batch(&records, lm, tau)?;
    let (result, _) = finish("rounds", lm, seed, tau, Some(1.0), outcome, &label_of)?;

    let transitions = crate::harness::multi_round_reduction(&result.reports)?;
    let reduction_pass = transitions
        .iter()
        .all(|t| t.fraction_reduced >= ROUNDS_MIN_FRACTION);
    let transition_detail = transitions
        .iter()
        .map(|t| {
            format!(
                "{}→{}: {:.4} of {} chains reduced",
                t.from_round, t.to_round, t.fraction_reduced, t.chains
            )
        })
        .collect::<Vec<_>>()
        .join("; ");

    let ranks = rounds_rank_preservation(&result.reports)?;
    let verdicts = vec![
        Verdict {
            name: "rounds-reduction".into(),
            pass: reduction_pass,
            detail: format!("{transition_detail} (needs ≥ {ROUNDS_MIN_FRACTION})"),
        },
        Verdict {
            name: "rounds-rank-preservation".into(),
            pass: ranks.fraction() >= ROUNDS_RANK_MIN,
            detail: format!(
                "{}/{} cross-mode pairs keep construction order ({:.4}, needs ≥ {ROUNDS_RANK_MIN})",
                ranks.matching,
                ranks.qualifying,
                ranks.fraction()
            ),
        },
    ];
    Ok(ExperimentOutcome { result, verdicts })
}

/// At every round, chains of a higher-information mode should measure
/// above positionally paired chains of lower-information modes.
pub fn rounds_rank_preservation(
    reports: &[RecordReport],
) -> Result<Consistency, ExperimentError> {
    let mut pooled = Consistency::default();
    for round in 1..=ROUND_COUNT {
        let of_mode = |mode: Mode| -> Vec<RecordReport> {
            reports
                .iter()
                .filter(|r| r.round == round && r.mode == mode)
                .cloned()
                .collect()
        };
        let polish = of_mode(Mode::Polish);
        let summary = of_mode(Mode::Summary);
        let title = of_mode(Mode::Title);
        for (hi, lo) in [(&polish, &summary), (&polish, &title), (&summary, &title)] {
            let common = hi.len().min(lo.len());
            if common == 0 {
                continue;
            }
            match pairwise_consistency(&hi[..common], &lo[..common], Ordering::Greater, 0.0) {
                Ok(c) => pooled.merge(c),
                Err(HarnessError::NoQualifyingPairs) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    if pooled.qualifying == 0 {
        return Err(ExperimentError::Harness(HarnessError::NoQualifyingPairs));
    }
    Ok(pooled)
}
