//! `hc` — measure the human share of AI-assisted text.
//!
//! Exit codes are a stable contract: 0 success, 1 usage or input
//! validation, 2 scoring or other runtime failure.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hc_core::corpus::GenerationRecord;
use hc_core::experiments::{experiment_lm, run_experiment, Experiment, ExperimentError};
use hc_core::harness::{
    evaluate_batch_at, group_phi, summarize, write_reports, write_result, BoxStats,
    ExperimentMeta, ExperimentResult,
};
use hc_core::{build_report, ContributionReport, LmParams, ReferenceLm, Scorer, ScoringRequest};
use hc_remote::{EndpointConfig, RemoteScorer};

#[derive(Parser)]
#[command(
    name = "hc",
    version,
    about = "Measure the human share of AI-assisted text",
    after_help = "Exit codes: 0 success, 1 usage/validation error, 2 scoring/runtime error.\n\
                  Environment: HC_API_KEY overrides --api-key config for the remote backend;\n\
                  RUST_LOG=debug surfaces request traces (secrets redacted)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: CommonOpts,
}

#[derive(Args)]
struct CommonOpts {
    /// Scoring backend.
    #[arg(long, global = true, value_enum, default_value_t = Backend::Reference)]
    backend: Backend,

    /// Base URL of an OpenAI-compatible completions endpoint (remote backend).
    #[arg(long, global = true)]
    endpoint: Option<String>,

    /// Model name for the remote backend.
    #[arg(long, global = true)]
    model: Option<String>,

    /// Text file to fit the reference model on.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,

    /// Load the reference model from a dump written by `hc lm-dump`.
    #[arg(long, global = true, conflicts_with = "corpus")]
    lm_file: Option<PathBuf>,

    /// Plausibility threshold τ, in (0, 1].
    #[arg(long, global = true, default_value_t = 0.65)]
    tau: f64,

    /// Text every output is scored against when no prompt is used.
    #[arg(long, global = true, default_value = "")]
    null_context: String,

    /// Seed for anything randomized (record synthesis).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// How single reports are printed on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    /// In-flight request bound for the remote backend.
    #[arg(long, global = true, default_value_t = 4)]
    max_concurrency: usize,

    /// More log output (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Reference,
    Remote,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Measure φ for an output file given the prompt that produced it.
    Measure {
        /// The prompt / human input.
        input: PathBuf,
        /// The text whose origin is being measured.
        output: PathBuf,
    },
    /// Bound the human share from the output alone (φ̂, no prompt needed).
    Estimate { output: PathBuf },
    /// Score a JSONL dataset of generation records.
    Batch {
        dataset: PathBuf,
        /// Where the per-record reports go (JSONL).
        #[arg(long, default_value = "results.jsonl")]
        out: PathBuf,
        /// Where the aggregate report goes (JSON).
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
    },
    /// Synthesize an experiment's records from a corpus, score them, and
    /// check the expected trends (reference backend only).
    Synth {
        /// One of: levels, length, temperature, rounds, attacks.
        experiment: String,
        /// Records per group.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "results.jsonl")]
        out: PathBuf,
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
        /// Also export per-group box statistics as CSV.
        #[arg(long)]
        plot_csv: Option<PathBuf>,
    },
    /// Fit the reference model on a corpus and write its dump file.
    LmDump {
        /// Where the model dump goes.
        #[arg(long, default_value = "model.lm")]
        out: PathBuf,
        /// Pseudo-count for the unigram/bigram laws.
        #[arg(long, default_value_t = LmParams::default().laplace_alpha)]
        laplace_alpha: f64,
        /// Copy-channel weight λ.
        #[arg(long, default_value_t = LmParams::default().copy_lambda)]
        copy_lambda: f64,
        /// Pseudo-count for the copy distribution.
        #[arg(long, default_value_t = LmParams::default().copy_alpha)]
        copy_alpha: f64,
    },
}

// ── errors → exit codes ─────────────────────────────────────────────────

struct CliError {
    code: u8,
    source: anyhow::Error,
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError { code: 1, source: e.into() }
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError { code: 2, source: e.into() }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.opts.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}

fn init_logging(verbose: u8) {
    let default_level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    let opts = &cli.opts;
    if !(opts.tau > 0.0 && opts.tau <= 1.0) {
        return Err(usage(anyhow!("--tau must lie in (0, 1], got {}", opts.tau)));
    }
    if opts.max_concurrency < 1 {
        return Err(usage(anyhow!("--max-concurrency must be at least 1")));
    }
    match cli.command {
        Command::Measure { input, output } => cmd_measure(&input, &output, opts),
        Command::Estimate { output } => cmd_estimate(&output, opts),
        Command::Batch { dataset, out, report } => cmd_batch(&dataset, &out, &report, opts),
        Command::Synth { experiment, n, out, report, plot_csv } => {
            cmd_synth(&experiment, n, &out, &report, plot_csv.as_deref(), opts)
        }
        Command::LmDump { out, laplace_alpha, copy_lambda, copy_alpha } => {
            let params = LmParams { laplace_alpha, copy_lambda, copy_alpha };
            cmd_lm_dump(&out, params, opts)
        }
    }
}

// ── scorer construction ─────────────────────────────────────────────────

/// The scorer plus the context the CLI itself must attach to
/// unconditional requests (the remote backend applies its configured null
/// context internally, so it gets none here).
fn build_scorer(opts: &CommonOpts) -> Result<(Box<dyn Scorer>, String), CliError> {
    match opts.backend {
        Backend::Reference => {
            let lm = load_reference_lm(opts, LmParams::default())?;
            Ok((Box::new(lm), opts.null_context.clone()))
        }
        Backend::Remote => {
            let endpoint = opts
                .endpoint
                .as_ref()
                .ok_or_else(|| usage(anyhow!("remote backend needs --endpoint")))?;
            let model = opts
                .model
                .as_ref()
                .ok_or_else(|| usage(anyhow!("remote backend needs --model")))?;
            let mut cfg = EndpointConfig::new(endpoint, model);
            cfg.null_context = opts.null_context.clone();
            cfg.max_concurrency = opts.max_concurrency;
            let scorer = RemoteScorer::new(cfg).map_err(usage)?;
            Ok((Box::new(scorer), String::new()))
        }
    }
}

fn load_reference_lm(opts: &CommonOpts, params: LmParams) -> Result<ReferenceLm, CliError> {
    if let Some(path) = &opts.lm_file {
        return ReferenceLm::load_from(path)
            .with_context(|| format!("loading model dump {}", path.display()))
            .map_err(usage);
    }
    let path = opts.corpus.as_ref().ok_or_else(|| {
        usage(anyhow!(
            "the reference backend needs --corpus <file> or --lm-file <dump>"
        ))
    })?;
    let text = read_text(path)?;
    ReferenceLm::from_corpus(&text, params)
        .with_context(|| format!("fitting the reference model on {}", path.display()))
        .map_err(usage)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)
}

/// Unconditional scoring request, with the null context attached when the
/// backend doesn't handle that itself.
fn base_request(text: &str, null_context: &str) -> Result<ScoringRequest, CliError> {
    let request = ScoringRequest::new(text).map_err(usage)?;
    Ok(if null_context.is_empty() {
        request
    } else {
        request.with_context(null_context)
    })
}

// ── single measurements ─────────────────────────────────────────────────

fn cmd_measure(input: &Path, output: &Path, opts: &CommonOpts) -> Result<(), CliError> {
    let input_text = read_text(input)?;
    let output_text = read_text(output)?;
    let (scorer, null_context) = build_scorer(opts)?;

    let unconditional = scorer
        .score(&base_request(&output_text, &null_context)?)
        .map_err(runtime)?;
    let conditional_request = ScoringRequest::new(&output_text)
        .map_err(usage)?
        .with_context(input_text);
    let conditional = scorer.score(&conditional_request).map_err(runtime)?;

    let report =
        build_report(&unconditional, Some(&conditional), Some(opts.tau)).map_err(runtime)?;
    print_report(&report, opts.format).map_err(runtime)
}

fn cmd_estimate(output: &Path, opts: &CommonOpts) -> Result<(), CliError> {
    let output_text = read_text(output)?;
    let (scorer, null_context) = build_scorer(opts)?;
    let unconditional = scorer
        .score(&base_request(&output_text, &null_context)?)
        .map_err(runtime)?;
    let report = build_report(&unconditional, None, Some(opts.tau)).map_err(runtime)?;
    print_report(&report, opts.format).map_err(runtime)
}

const CSV_HEADER: &str =
    "self_info,cond_self_info,mutual_info,phi,phi_min,token_count,tau,plausible,scorer_id,flags";

fn print_report(report: &ContributionReport, format: Format) -> anyhow::Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string(report)?),
        Format::Csv => {
            println!("{CSV_HEADER}");
            println!("{}", csv_row(report));
        }
    }
    Ok(())
}

fn csv_row(r: &ContributionReport) -> String {
    let opt_f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let opt_b = |v: Option<bool>| v.map(|x| x.to_string()).unwrap_or_default();
    [
        r.self_info.to_string(),
        opt_f(r.cond_self_info),
        opt_f(r.mutual_info),
        opt_f(r.phi),
        opt_f(r.phi_min),
        r.token_count.to_string(),
        opt_f(r.tau),
        opt_b(r.plausible),
        csv_escape(&r.scorer_id),
        csv_escape(&r.flags.join(";")),
    ]
    .join(",")
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

// ── batch scoring ───────────────────────────────────────────────────────

fn cmd_batch(dataset: &Path, out: &Path, report: &Path, opts: &CommonOpts) -> Result<(), CliError> {
    let text = read_text(dataset)?;
    let records = parse_records(&text).map_err(usage)?;
    let (scorer, null_context) = build_scorer(opts)?;

    let outcome = if records.is_empty() {
        Default::default()
    } else {
        evaluate_batch_at(&records, scorer.as_ref(), Some(opts.tau), 1.0, &null_context)
            .map_err(runtime)?
    };

    let mut groups: BTreeMap<String, BoxStats> = BTreeMap::new();
    let by_mode = group_phi(&outcome.reports, |r| r.mode.as_str().to_string()).map_err(runtime)?;
    for (label, phis) in by_mode {
        groups.insert(label, summarize(&phis).map_err(runtime)?);
    }

    let mut meta = ExperimentMeta::new("batch", scorer.id(), opts.seed);
    meta.tau = Some(opts.tau);
    meta.null_context = opts.null_context.clone();
    let result =
        ExperimentResult::new(meta, groups, outcome.reports, outcome.failures).map_err(runtime)?;

    write_reports(out, &result.reports).map_err(runtime)?;
    write_result(report, &result).map_err(runtime)?;
    println!(
        "scored {} of {} records ({} failed) -> {}, {}",
        result.reports.len(),
        records.len(),
        result.failures.len(),
        out.display(),
        report.display()
    );
    Ok(())
}

fn parse_records(text: &str) -> anyhow::Result<Vec<GenerationRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: GenerationRecord = serde_json::from_str(line)
            .with_context(|| format!("dataset line {}", lineno + 1))?;
        record
            .validate()
            .with_context(|| format!("dataset line {}", lineno + 1))?;
        if !seen.insert(record.id.clone()) {
            return Err(anyhow!(
                "dataset line {}: duplicate record id {:?}",
                lineno + 1,
                record.id
            ));
        }
        records.push(record);
    }
    Ok(records)
}

// ── synthetic experiments ───────────────────────────────────────────────

fn cmd_synth(
    experiment: &str,
    n: usize,
    out: &Path,
    report: &Path,
    plot_csv: Option<&Path>,
    opts: &CommonOpts,
) -> Result<(), CliError> {
    let experiment = Experiment::from_str(experiment).map_err(usage)?;
    if opts.backend == Backend::Remote {
        return Err(usage(anyhow!(
            "synth builds and samples the reference model, so it only runs on --backend reference"
        )));
    }
    let corpus_path = opts
        .corpus
        .as_ref()
        .ok_or_else(|| usage(anyhow!("synth needs --corpus <file>")))?;
    let corpus = read_text(corpus_path)?;
    let lm = experiment_lm(&corpus)
        .with_context(|| format!("fitting the reference model on {}", corpus_path.display()))
        .map_err(usage)?;

    let outcome = run_experiment(experiment, &lm, n, opts.seed, Some(opts.tau)).map_err(|e| {
        match e {
            ExperimentError::InvalidArgs(_) => usage(e),
            other => runtime(other),
        }
    })?;

    write_reports(out, &outcome.result.reports).map_err(runtime)?;
    write_result(report, &outcome.result).map_err(runtime)?;
    if let Some(path) = plot_csv {
        fs::write(path, outcome.result.plot_csv())
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime)?;
    }

    let mut summary = String::new();
    for v in &outcome.verdicts {
        let _ = writeln!(
            summary,
            "{} {} — {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.detail
        );
    }
    let _ = write!(
        summary,
        "{} reports ({} failed) -> {}, {}",
        outcome.result.reports.len(),
        outcome.result.failures.len(),
        out.display(),
        report.display()
    );
    println!("{summary}");
    Ok(())
}

// ── model dumps ─────────────────────────────────────────────────────────

fn cmd_lm_dump(out: &Path, params: LmParams, opts: &CommonOpts) -> Result<(), CliError> {
    let corpus_path = opts
        .corpus
        .as_ref()
        .ok_or_else(|| usage(anyhow!("lm-dump needs --corpus <file>")))?;
    let corpus = read_text(corpus_path)?;
    let lm = ReferenceLm::from_corpus(&corpus, params)
        .with_context(|| format!("fitting the reference model on {}", corpus_path.display()))
        .map_err(usage)?;
    lm.save_to(out)
        .with_context(|| format!("writing {}", out.display()))
        .map_err(runtime)?;
    println!("{} ({} word vocabulary) -> {}", lm.id(), lm.vocab_size(), out.display());
    Ok(())
}
