//! Generation records, prompt templates, and JSONL persistence.
//!
//! A [`GenerationRecord`] captures one assisted-writing event: what the
//! human supplied (`human_input`, the full prompt as given to the
//! generator), what came back (`output`), and enough metadata to score and
//! group the pair later. Records travel as JSONL, one object per line;
//! unknown fields survive a load/save round trip untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version stamp for the prompt templates below. Copied into experiment
/// reports so numbers are never compared across template revisions.
pub const TEMPLATE_VERSION: &str = "tpl-v1";

/// Instruction used when chaining refinement rounds synthetically.
pub const REFINEMENT_INSTRUCTION: &str = "Add more detail.";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{}field {field}: {message}", .line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Validation {
        line: Option<usize>,
        field: String,
        message: String,
    },
    #[error("mode {mode} needs the {level} information level")]
    MissingLevel { mode: Mode, level: &'static str },
    #[error("unknown attack kind: {0}")]
    InvalidAttack(String),
}

impl CorpusError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        CorpusError::Validation {
            line: None,
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    PaperAbstract,
    News,
    PatentAbstract,
    Poem,
    Other,
}

/// How the human's information entered the prompt, from most to least of
/// the output's content: polishing a full draft, expanding a summary,
/// expanding a title, writing on a bare subject, or a freeform prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Polish,
    Summary,
    Title,
    Subject,
    Freeform,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Polish => "polish",
            Mode::Summary => "summary",
            Mode::Title => "title",
            Mode::Subject => "subject",
            Mode::Freeform => "freeform",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    None,
    RareWords,
    MimicHuman,
}

impl Attack {
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        match text {
            "none" => Ok(Attack::None),
            "rare_words" => Ok(Attack::RareWords),
            "mimic_human" => Ok(Attack::MimicHuman),
            other => Err(CorpusError::InvalidAttack(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Attack::None => "none",
            Attack::RareWords => "rare_words",
            Attack::MimicHuman => "mimic_human",
        }
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The exact instruction appended to a prompt for an adaptive attack.
/// `Attack::None` appends nothing.
pub fn attack_suffix(kind: Attack) -> &'static str {
    match kind {
        Attack::None => "",
        Attack::RareWords => "Always choose words you rarely use.",
        Attack::MimicHuman => "Mimic human writing.",
    }
}

fn default_round() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub domain: Domain,
    pub mode: Mode,
    /// The full prompt that produced `output`; doubles as the conditioning
    /// context when scoring.
    pub human_input: String,
    pub output: String,
    pub model_id: String,
    #[serde(default = "default_round")]
    pub round: u32,
    /// Generation-time sampling temperature (metadata; the measurement
    /// temperature is a property of the scoring pass, not the record).
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_target: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<Attack>,
    /// Any fields this version doesn't know about, preserved on round-trip.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl GenerationRecord {
    /// Field-level invariants beyond what deserialization enforces.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.id.is_empty() {
            return Err(CorpusError::invalid("id", "must be nonempty"));
        }
        if self.output.is_empty() {
            return Err(CorpusError::invalid("output", "must be nonempty"));
        }
        if self.round < 1 {
            return Err(CorpusError::invalid("round", "must be at least 1"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(CorpusError::invalid(
                "temperature",
                format!("must be positive, got {}", self.temperature),
            ));
        }
        if self.mode == Mode::Subject && self.domain == Domain::Poem {
            return Err(CorpusError::invalid(
                "mode",
                "subject mode is not defined for poems",
            ));
        }
        if let Some(n) = self.length_target {
            if n == 0 {
                return Err(CorpusError::invalid("length_target", "must be positive"));
            }
        }
        Ok(())
    }

    /// Chain id shared by every round of a refinement chain.
    pub fn chain_id(&self) -> &str {
        chain_id(&self.id)
    }
}

/// Record id with any `#r<n>` round suffix removed; rounds of one chain
/// share this prefix.
pub fn chain_id(id: &str) -> &str {
    match id.rfind("#r") {
        Some(pos)
            if pos + 2 < id.len() && id[pos + 2..].chars().all(|c| c.is_ascii_digit()) =>
        {
            &id[..pos]
        }
        _ => id,
    }
}

/// The four nested information levels a source document provides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InfoLevels {
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

/// Instantiate the fixed prompt template for a generation mode.
///
/// The optional length directive and attack suffix are appended in that
/// order. Freeform mode passes `content` through verbatim.
pub fn build_prompt(
    mode: Mode,
    levels: &InfoLevels,
    attack: Option<Attack>,
    length_target: Option<u32>,
) -> Result<String, CorpusError> {
    let missing = |level: &'static str| CorpusError::MissingLevel { mode, level };
    let level_text = |opt: &Option<String>, level: &'static str| {
        opt.as_deref()
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .ok_or_else(|| missing(level))
    };
    let mut prompt = match mode {
        Mode::Polish => {
            if levels.content.is_empty() {
                return Err(missing("content"));
            }
            format!(
                "Polish the following text, preserving its meaning:\n\n{}",
                levels.content
            )
        }
        Mode::Summary => format!(
            "Write a complete piece based on this summary:\n\n{}",
            level_text(&levels.summary, "summary")?
        ),
        Mode::Title => format!(
            "Write a complete piece based on this title: {}",
            level_text(&levels.title, "title")?
        ),
        Mode::Subject => format!(
            "Write a complete piece about this subject: {}",
            level_text(&levels.subject, "subject")?
        ),
        Mode::Freeform => {
            if levels.content.is_empty() {
                return Err(missing("content"));
            }
            levels.content.clone()
        }
    };
    if let Some(n) = length_target {
        prompt.push_str(&format!("\n\nTarget length: about {n} words."));
    }
    match attack.unwrap_or(Attack::None) {
        Attack::None => {}
        kind => {
            prompt.push('\n');
            prompt.push_str(attack_suffix(kind));
        }
    }
    Ok(prompt)
}

/// Best-effort field name out of a serde error message, so a missing or
/// ill-typed field surfaces as a validation error naming it.
fn serde_field(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "record".to_string())
}

/// Load and validate a JSONL record file. Whitespace-only lines are
/// skipped; every error carries its 1-based line number.
pub fn load_records(path: &Path) -> Result<Vec<GenerationRecord>, CorpusError> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        let record: GenerationRecord =
            serde_json::from_value(value).map_err(|e| CorpusError::Validation {
                line: Some(line_no),
                field: serde_field(&e.to_string()),
                message: e.to_string(),
            })?;
        record.validate().map_err(|e| match e {
            CorpusError::Validation { field, message, .. } => CorpusError::Validation {
                line: Some(line_no),
                field,
                message,
            },
            other => other,
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Write records as canonical JSONL: declared fields in struct order,
/// unknown extras alphabetically, one `\n`-terminated object per line.
/// Loading the output and saving again is byte-identical.
pub fn save_records(path: &Path, records: &[GenerationRecord]) -> Result<(), CorpusError> {
    let mut out = std::fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CorpusError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Derive the next refinement round from a previous record.
///
/// The new record's `human_input` is the cumulative transcript — previous
/// input, previous output, then the refinement instruction, joined by blank
/// lines — which is exactly the conditioning context a scorer should use
/// for the new output. Mode, domain, model and temperature carry over;
/// attack and length directives do not.
pub fn make_refinement_record(
    prev: &GenerationRecord,
    new_output: &str,
    instruction: &str,
) -> Result<GenerationRecord, CorpusError> {
    if new_output.is_empty() {
        return Err(CorpusError::invalid("output", "must be nonempty"));
    }
    let round = prev.round + 1;
    let record = GenerationRecord {
        id: format!("{}#r{}", prev.chain_id(), round),
        domain: prev.domain,
        mode: prev.mode,
        human_input: format!("{}\n\n{}\n\n{}", prev.human_input, prev.output, instruction),
        output: new_output.to_string(),
        model_id: prev.model_id.clone(),
        round,
        temperature: prev.temperature,
        length_target: None,
        attack: None,
        extra: prev.extra.clone(),
    };
    record.validate()?;
    Ok(record)
}
