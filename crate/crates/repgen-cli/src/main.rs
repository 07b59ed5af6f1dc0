//! Command-line front end for the report-generation pipeline.
//!
//! One binary with subcommands covering corpus construction, indexing,
//! retrieval, purification, labeling, reward scoring, synthetic data,
//! training, evaluation, the ablation grid, and the alpha sweep. Data goes
//! to declared files or standard output; logs go to standard error. All
//! file writes are atomic (write to a temporary file, then rename). Exit
//! codes: 0 success, 1 usage error, 2 runtime error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use repgen::corpus::{build_corpus, load_corpus, save_corpus, KnowledgeCorpus};
use repgen::embedding::{embed_image, load_image_records, HashingEmbedder, ImageRecord};
use repgen::fsio::atomic_write;
use repgen::harness::{
    ablate, evaluate_policy, split_dataset, sweep_alpha, AblationRow, AlphaPoint,
    DEFAULT_ALPHA_GRID,
};
use repgen::labeler::{
    default_lexicon, label_report, load_lexicon, LabelLexicon, UncertaintyPolicy,
};
use repgen::metrics::{evaluate_corpus, BleuSmoothing, EvalReport};
use repgen::policy::{load_checkpoint, save_checkpoint};
use repgen::retrieval::{
    build_index, load_index, purify, retrieve, save_index, ClinicalContext, RetrievalIndex,
    ScoredFact, DEFAULT_PURIFY_M, DEFAULT_RETRIEVE_K,
};
use repgen::rewards::{
    compute_reward, JudgeConfig, JudgeMode, RewardConfig, RewardCounters, RewardMode,
    DEFAULT_ALPHA,
};
use repgen::text::policy_tokens;
use repgen::trainer::{
    load_dataset, make_synthetic_dataset, save_dataset, save_training_log, train, TrainingConfig,
    TrainingRecord,
};

#[derive(Parser, Debug)]
#[command(
    name = "repgen",
    version,
    about = "Knowledge-grounded report generation: retrieval, rewards, training, evaluation",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split documents into a deduplicated fact corpus
    BuildCorpus(BuildCorpusArgs),
    /// Embed a fact corpus into a retrieval index
    Index(IndexArgs),
    /// Rank facts by cosine similarity to an image embedding
    Retrieve(RetrieveArgs),
    /// Re-rank retrieved candidates against the clinical context
    Purify(PurifyArgs),
    /// Extract disease mention labels from report text
    Label(LabelArgs),
    /// Score a generated report against a reference report
    Reward(RewardArgs),
    /// Generate a synthetic image/context/report dataset
    SynthData(SynthDataArgs),
    /// Train the report-generation policy
    Train(TrainArgs),
    /// Compute generation metrics from text files or a checkpoint
    Eval(EvalArgs),
    /// Train and measure the six ablation configurations
    Ablate(AblateArgs),
    /// Train the full configuration across a grid of alpha values
    SweepAlpha(SweepAlphaArgs),
}

#[derive(Args, Debug)]
struct BuildCorpusArgs {
    /// Input text file, one source document per line
    #[arg(long)]
    input: PathBuf,
    /// Corpus output file (JSON Lines)
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct IndexArgs {
    /// Corpus file produced by build-corpus
    #[arg(long)]
    corpus: PathBuf,
    /// Index output file (JSON Lines)
    #[arg(long)]
    output: PathBuf,
    /// Embedding dimension of the hashing embedder
    #[arg(long, default_value_t = repgen::embedding::DEFAULT_DIM)]
    dim: usize,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("query").required(true).args(["report", "images"]))]
struct RetrieveArgs {
    /// Corpus file (for fact texts in the output)
    #[arg(long)]
    corpus: PathBuf,
    /// Index file produced by index
    #[arg(long)]
    index: PathBuf,
    /// Query report text to embed in place of image features
    #[arg(long)]
    report: Option<String>,
    /// Image records file (JSON Lines); the first record is used unless --image-id is given
    #[arg(long)]
    images: Option<PathBuf>,
    /// Id of the image record to query with
    #[arg(long, requires = "images")]
    image_id: Option<String>,
    /// Number of facts to return
    #[arg(long, default_value_t = DEFAULT_RETRIEVE_K)]
    k: usize,
    /// Gaussian noise added to report-derived embeddings
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Seed for the embedding noise
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (JSON Lines); omit to write to stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PurifyArgs {
    /// Candidate facts (JSON Lines with fact_id and score, as emitted by retrieve)
    #[arg(long)]
    candidates: PathBuf,
    /// Corpus file (for fact texts)
    #[arg(long)]
    corpus: PathBuf,
    /// Indication text of the clinical context
    #[arg(long, default_value = "")]
    indication: String,
    /// History text of the clinical context
    #[arg(long, default_value = "")]
    history: String,
    /// Number of facts to keep
    #[arg(long, default_value_t = DEFAULT_PURIFY_M)]
    m: usize,
    /// Embedding dimension used for context similarity
    #[arg(long, default_value_t = repgen::embedding::DEFAULT_DIM)]
    dim: usize,
    /// Output file (JSON Lines); omit to write to stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["text", "input"]))]
struct LabelArgs {
    /// Report text to label
    #[arg(long)]
    text: Option<String>,
    /// Input text file, one report per line
    #[arg(long)]
    input: Option<PathBuf>,
    /// Lexicon file; omit to use the built-in lexicon
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Output file (JSON Lines); omit to write to stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum RewardModeArg {
    Blend,
    DiseaseOnly,
    SentenceOnly,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum JudgeModeArg {
    Offline,
    Remote,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum UncertaintyArg {
    Positive,
    Negative,
}

impl From<UncertaintyArg> for UncertaintyPolicy {
    fn from(arg: UncertaintyArg) -> Self {
        match arg {
            UncertaintyArg::Positive => UncertaintyPolicy::UncertainAsPositive,
            UncertaintyArg::Negative => UncertaintyPolicy::UncertainAsNegative,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SmoothingArg {
    None,
    AddOne,
}

#[derive(Args, Debug)]
struct RewardArgs {
    /// Generated report text
    #[arg(long)]
    generated: String,
    /// Reference report text
    #[arg(long)]
    reference: String,
    /// Blend weight: alpha * sentence reward + (1 - alpha) * disease reward
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Which reward components to compute
    #[arg(long, value_enum, default_value_t = RewardModeArg::Blend)]
    mode: RewardModeArg,
    /// How uncertain mentions count in the disease reward
    #[arg(long, value_enum, default_value_t = UncertaintyArg::Positive)]
    uncertainty: UncertaintyArg,
    /// Sentence judge backend
    #[arg(long, value_enum, default_value_t = JudgeModeArg::Offline)]
    judge: JudgeModeArg,
    /// Remote judge endpoint URL (required when --judge remote)
    #[arg(long)]
    endpoint: Option<String>,
    /// Remote judge timeout in seconds
    #[arg(long, default_value_t = 10)]
    timeout_secs: u64,
    /// Remote judge retries per sentence pair
    #[arg(long, default_value_t = 2)]
    retries: u32,
    /// Lexicon file; omit to use the built-in lexicon
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Output file (JSON); omit to write to stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthDataArgs {
    /// Number of records to generate
    #[arg(long)]
    n: usize,
    /// Generation seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset output file (JSON Lines); omit to write to stdout
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write the generating labels here (JSON Lines)
    #[arg(long)]
    labels_output: Option<PathBuf>,
    /// Lexicon file; omit to use the built-in lexicon
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset (JSON Lines of image/context/reference records)
    #[arg(long)]
    data: PathBuf,
    /// Training config file (JSON); omitted fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus file for knowledge conditioning
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Index file for knowledge conditioning
    #[arg(long)]
    index: Option<PathBuf>,
    /// Checkpoint output file (JSON)
    #[arg(long)]
    checkpoint_out: PathBuf,
    /// Per-step training log output file (JSON Lines)
    #[arg(long)]
    log_out: Option<PathBuf>,
    /// Lexicon file; omit to use the built-in lexicon
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["candidates", "checkpoint"]))]
struct EvalArgs {
    /// Candidate reports, one per line (metrics mode)
    #[arg(long, requires = "references", conflicts_with_all = ["checkpoint", "data"])]
    candidates: Option<PathBuf>,
    /// Reference reports, one per line (metrics mode)
    #[arg(long, requires = "candidates")]
    references: Option<PathBuf>,
    /// Trained checkpoint to decode with (policy mode)
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    /// Evaluation dataset (JSON Lines; policy mode)
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
    /// Corpus file for knowledge conditioning (policy mode)
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Index file for knowledge conditioning (policy mode)
    #[arg(long)]
    index: Option<PathBuf>,
    /// Training config file (JSON) for decode settings (policy mode)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed (policy mode)
    #[arg(long)]
    seed: Option<u64>,
    /// Include the per-example breakdown (and decoded reports in policy mode)
    #[arg(long)]
    per_example: bool,
    /// How uncertain mentions count in clinical-efficacy metrics (metrics mode)
    #[arg(long, value_enum, default_value_t = UncertaintyArg::Positive)]
    uncertainty: UncertaintyArg,
    /// BLEU smoothing variant (metrics mode)
    #[arg(long, value_enum, default_value_t = SmoothingArg::None)]
    smoothing: SmoothingArg,
    /// Lexicon file; omit to use the built-in lexicon
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Output file (JSON); omit to write to stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Existing dataset file (JSON Lines); omit to generate synthetically
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic dataset size when --data is not given
    #[arg(long, default_value_t = 300)]
    n: usize,
    /// Shared seed for data generation and every row's training run
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Fraction of the dataset held out for measurement
    #[arg(long, default_value_t = 0.2)]
    held_out: f64,
    /// Base training config file (JSON); row switches override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Row output file (JSON Lines, rewritten as each row completes); omit for stdout
    #[arg(long)]
    output: Option<PathBuf>,
    /// Lexicon file; omit to use the built-in lexicon
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepAlphaArgs {
    /// Existing dataset file (JSON Lines); omit to generate synthetically
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic dataset size when --data is not given
    #[arg(long, default_value_t = 300)]
    n: usize,
    /// Shared seed for data generation and every point's training run
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Fraction of the dataset held out for measurement
    #[arg(long, default_value_t = 0.2)]
    held_out: f64,
    /// Alpha values to sweep (comma separated, each in [0, 1])
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ALPHA_GRID)]
    values: Vec<f64>,
    /// Base training config file (JSON)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Point output file (JSON Lines, rewritten as each point completes); omit for stdout
    #[arg(long)]
    output: Option<PathBuf>,
    /// Lexicon file; omit to use the built-in lexicon
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

/// Errors after successful argument parsing are runtime errors (exit 2);
/// argument problems are caught by clap and exit 1.
#[derive(Debug)]
struct RuntimeError(String);

impl std::fmt::Display for RuntimeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<repgen::Error> for RuntimeError {
    fn from(err: repgen::Error) -> Self {
        RuntimeError(err.to_string())
    }
}

impl From<std::io::Error> for RuntimeError {
    fn from(err: std::io::Error) -> Self {
        RuntimeError(err.to_string())
    }
}

impl From<serde_json::Error> for RuntimeError {
    fn from(err: serde_json::Error) -> Self {
        RuntimeError(err.to_string())
    }
}

type CliResult = Result<(), RuntimeError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::BuildCorpus(args) => run_build_corpus(args),
        Command::Index(args) => run_index(args),
        Command::Retrieve(args) => run_retrieve(args),
        Command::Purify(args) => run_purify(args),
        Command::Label(args) => run_label(args),
        Command::Reward(args) => run_reward(args),
        Command::SynthData(args) => run_synth_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Ablate(args) => run_ablate(args),
        Command::SweepAlpha(args) => run_sweep_alpha(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

/// Writes data atomically to `output`, or to stdout when no file is given.
fn emit(output: Option<&Path>, data: &str) -> CliResult {
    match output {
        Some(path) => Ok(atomic_write(path, data.as_bytes())?),
        None => {
            print!("{data}");
            Ok(())
        }
    }
}

fn emit_json_lines<T: Serialize>(output: Option<&Path>, rows: &[T]) -> CliResult {
    let mut data = String::new();
    for row in rows {
        data.push_str(&serde_json::to_string(row)?);
        data.push('\n');
    }
    emit(output, &data)
}

fn load_lexicon_or_default(path: Option<&Path>) -> Result<LabelLexicon, RuntimeError> {
    match path {
        Some(path) => Ok(load_lexicon(path)?),
        None => Ok(default_lexicon()),
    }
}

fn load_config_or_default(
    path: Option<&Path>,
    seed: Option<u64>,
) -> Result<TrainingConfig, RuntimeError> {
    let mut config = match path {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TrainingConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn read_report_lines(path: &Path) -> Result<Vec<String>, RuntimeError> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|line| !line.is_empty())
        .map(str::to_string)
        .collect())
}

fn run_build_corpus(args: BuildCorpusArgs) -> CliResult {
    let documents = read_report_lines(&args.input)?;
    let corpus = build_corpus(&documents)?;
    eprintln!(
        "built corpus: {} facts from {} documents, fingerprint {}",
        corpus.facts().len(),
        documents.len(),
        corpus.fingerprint()
    );
    Ok(save_corpus(&corpus, &args.output)?)
}

fn run_index(args: IndexArgs) -> CliResult {
    let corpus = load_corpus(&args.corpus)?;
    let embedder = HashingEmbedder::new(args.dim);
    let index = build_index(&corpus, &embedder)?;
    eprintln!("built index: {} keys, dim {}", index.len(), index.dim());
    Ok(save_index(&index, &args.output)?)
}

/// A scored fact joined with its text for readable output.
#[derive(Serialize)]
struct ScoredFactLine<'a> {
    fact_id: usize,
    score: f64,
    text: &'a str,
}

fn fact_text(corpus: &KnowledgeCorpus, fact_id: usize) -> &str {
    corpus
        .facts()
        .get(fact_id)
        .map(|f| f.text.as_str())
        .unwrap_or("")
}

fn query_record(args: &RetrieveArgs) -> Result<ImageRecord, RuntimeError> {
    match (&args.report, &args.images) {
        (Some(text), None) => Ok(ImageRecord {
            id: "query".into(),
            features: None,
            paired_report: Some(text.clone()),
        }),
        (None, Some(path)) => {
            let records = load_image_records(path)?;
            match &args.image_id {
                Some(id) => records.into_iter().find(|r| &r.id == id).ok_or_else(|| {
                    RuntimeError(format!("image id {:?} not found in {}", id, path.display()))
                }),
                None => records
                    .into_iter()
                    .next()
                    .ok_or_else(|| RuntimeError(format!("no image records in {}", path.display()))),
            }
        }
        _ => unreachable!("argument group enforces exactly one query source"),
    }
}

fn run_retrieve(args: RetrieveArgs) -> CliResult {
    let corpus = load_corpus(&args.corpus)?;
    let index = load_index(&args.index)?;
    let embedder = HashingEmbedder::new(index.dim());
    let record = query_record(&args)?;
    let query = embed_image(&record, &embedder, args.noise_sigma, args.seed)?;
    let scored = retrieve(&index, &query, args.k)?;
    eprintln!("retrieved {} of {} facts", scored.len(), index.len());
    let rows: Vec<ScoredFactLine> = scored
        .iter()
        .map(|s| ScoredFactLine {
            fact_id: s.fact_id,
            score: s.score,
            text: fact_text(&corpus, s.fact_id),
        })
        .collect();
    emit_json_lines(args.output.as_deref(), &rows)
}

#[derive(Serialize)]
struct PurifiedFactLine<'a> {
    fact_id: usize,
    score: f64,
    retrieval_score: f64,
    text: &'a str,
}

fn load_candidates(path: &Path) -> Result<Vec<ScoredFact>, RuntimeError> {
    let raw = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

fn run_purify(args: PurifyArgs) -> CliResult {
    let candidates = load_candidates(&args.candidates)?;
    let corpus = load_corpus(&args.corpus)?;
    let embedder = HashingEmbedder::new(args.dim);
    let context = ClinicalContext {
        indication: args.indication.clone(),
        history: args.history.clone(),
    };
    let outcome = purify(&candidates, &context, &corpus, &embedder, args.m)?;
    if outcome.context_free {
        eprintln!("note: empty clinical context; retrieval order kept unchanged");
    }
    eprintln!("kept {} of {} candidates", outcome.facts.len(), candidates.len());
    let rows: Vec<PurifiedFactLine> = outcome
        .facts
        .iter()
        .map(|f| PurifiedFactLine {
            fact_id: f.fact_id,
            score: f.score,
            retrieval_score: f.retrieval_score,
            text: fact_text(&corpus, f.fact_id),
        })
        .collect();
    emit_json_lines(args.output.as_deref(), &rows)
}

#[derive(Serialize)]
struct LabeledReport<'a> {
    report: &'a str,
    labels: std::collections::BTreeMap<&'static str, repgen::labeler::Mention>,
}

fn run_label(args: LabelArgs) -> CliResult {
    let lexicon = load_lexicon_or_default(args.lexicon.as_deref())?;
    let reports = match (&args.text, &args.input) {
        (Some(text), None) => vec![text.clone()],
        (None, Some(path)) => read_report_lines(path)?,
        _ => unreachable!("argument group enforces exactly one source"),
    };
    let rows: Vec<LabeledReport> = reports
        .iter()
        .map(|report| LabeledReport {
            report,
            labels: label_report(report, &lexicon).to_name_map(),
        })
        .collect();
    emit_json_lines(args.output.as_deref(), &rows)
}

fn run_reward(args: RewardArgs) -> CliResult {
    let lexicon = load_lexicon_or_default(args.lexicon.as_deref())?;
    let config = RewardConfig {
        alpha: args.alpha,
        mode: match args.mode {
            RewardModeArg::Blend => RewardMode::Blend,
            RewardModeArg::DiseaseOnly => RewardMode::DiseaseOnly,
            RewardModeArg::SentenceOnly => RewardMode::SentenceOnly,
        },
        uncertainty_policy: args.uncertainty.into(),
        judge: JudgeConfig {
            mode: match args.judge {
                JudgeModeArg::Offline => JudgeMode::Offline,
                JudgeModeArg::Remote => JudgeMode::Remote,
            },
            endpoint: args.endpoint.clone(),
            timeout_secs: args.timeout_secs,
            retries: args.retries,
            ..JudgeConfig::default()
        },
    };
    let tokens = policy_tokens(&args.generated);
    let mut counters = RewardCounters::default();
    let trace = compute_reward(&tokens, false, &args.reference, &lexicon, &config, &mut counters)?;
    eprintln!(
        "judge calls: {} remote, {} offline{}",
        counters.remote_judge_requests,
        counters.offline_judge_calls,
        if trace.degraded { " (degraded)" } else { "" }
    );
    let mut data = serde_json::to_string(&trace)?;
    data.push('\n');
    emit(args.output.as_deref(), &data)
}

fn run_synth_data(args: SynthDataArgs) -> CliResult {
    let lexicon = load_lexicon_or_default(args.lexicon.as_deref())?;
    let dataset = make_synthetic_dataset(args.n, args.seed, &lexicon)?;
    eprintln!("generated {} records with seed {}", dataset.records.len(), args.seed);
    if let Some(path) = &args.labels_output {
        let rows: Vec<_> = dataset.labels.iter().map(|l| l.to_name_map()).collect();
        emit_json_lines(Some(path), &rows)?;
    }
    match &args.output {
        Some(path) => Ok(save_dataset(&dataset.records, path)?),
        None => emit_json_lines(None, &dataset.records),
    }
}

fn load_conditioning(
    corpus: Option<&Path>,
    index: Option<&Path>,
) -> Result<(Option<KnowledgeCorpus>, Option<RetrievalIndex>), RuntimeError> {
    let corpus = corpus.map(load_corpus).transpose()?;
    let index = index.map(load_index).transpose()?;
    Ok((corpus, index))
}

fn run_train(args: TrainArgs) -> CliResult {
    let lexicon = load_lexicon_or_default(args.lexicon.as_deref())?;
    let config = load_config_or_default(args.config.as_deref(), args.seed)?;
    let dataset = load_dataset(&args.data)?;
    let (corpus, index) = load_conditioning(args.corpus.as_deref(), args.index.as_deref())?;
    eprintln!(
        "training on {} records, {} epochs, seed {}",
        dataset.len(),
        config.epochs,
        config.seed
    );
    let outcome = train(&dataset, corpus.as_ref(), index.as_ref(), &lexicon, &config)?;
    save_checkpoint(&outcome.params, &outcome.vocab, config.seed, &args.checkpoint_out)?;
    if let Some(path) = &args.log_out {
        save_training_log(&outcome.log, path)?;
    }
    let last = outcome.log.last();
    eprintln!(
        "done: {} steps, final loss {}, counters {:?}",
        outcome.log.len(),
        last.map(|s| s.l).unwrap_or(f64::NAN),
        outcome.counters
    );
    Ok(())
}

/// Serializable policy-mode evaluation summary.
#[derive(Serialize)]
struct PolicyEvalOutput {
    mean_reward: f64,
    report: EvalReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    decoded: Vec<String>,
}

fn run_eval(args: EvalArgs) -> CliResult {
    let data = match (&args.candidates, &args.checkpoint) {
        (Some(candidates), None) => {
            let candidates = read_report_lines(candidates)?;
            let references = read_report_lines(args.references.as_ref().expect("clap requires"))?;
            let lexicon = load_lexicon_or_default(args.lexicon.as_deref())?;
            let smoothing = match args.smoothing {
                SmoothingArg::None => BleuSmoothing::None,
                SmoothingArg::AddOne => BleuSmoothing::AddOne,
            };
            let mut report = evaluate_corpus(
                &candidates,
                &references,
                &lexicon,
                args.uncertainty.into(),
                smoothing,
            )?;
            if !args.per_example {
                report.per_example.clear();
            }
            serde_json::to_string(&report)?
        }
        (None, Some(checkpoint)) => {
            let lexicon = load_lexicon_or_default(args.lexicon.as_deref())?;
            let config = load_config_or_default(args.config.as_deref(), args.seed)?;
            let dataset = load_dataset(args.data.as_ref().expect("clap requires"))?;
            let (corpus, index) =
                load_conditioning(args.corpus.as_deref(), args.index.as_deref())?;
            let (params, vocab, _) = load_checkpoint(checkpoint)?;
            let outcome = evaluate_policy(
                &params,
                &vocab,
                &dataset,
                corpus.as_ref(),
                index.as_ref(),
                &lexicon,
                &config,
            )?;
            let mut out = PolicyEvalOutput {
                mean_reward: outcome.mean_reward,
                report: outcome.report,
                decoded: outcome.decoded,
            };
            if !args.per_example {
                out.report.per_example.clear();
                out.decoded.clear();
            }
            serde_json::to_string(&out)?
        }
        _ => unreachable!("argument group enforces exactly one mode"),
    };
    emit(args.output.as_deref(), &format!("{data}\n"))
}

/// Dataset, split point, corpus, and index shared by ablate and sweep-alpha.
struct StudySetup {
    dataset: Vec<TrainingRecord>,
    held: usize,
    corpus: KnowledgeCorpus,
    index: RetrievalIndex,
}

fn prepare_study(
    data: Option<&Path>,
    n: usize,
    held_out: f64,
    lexicon: &LabelLexicon,
    config: &TrainingConfig,
) -> Result<StudySetup, RuntimeError> {
    let dataset = match data {
        Some(path) => load_dataset(path)?,
        None => make_synthetic_dataset(n, config.seed, lexicon)?.records,
    };
    let (train_set, eval_set) = split_dataset(&dataset, held_out)?;
    let held = eval_set.len();
    let references: Vec<String> = train_set.iter().map(|r| r.reference.clone()).collect();
    let corpus = build_corpus(&references)?;
    let embedder = HashingEmbedder::new(config.embed_dim);
    let index = build_index(&corpus, &embedder)?;
    eprintln!(
        "study setup: {} train / {} eval records, {} facts",
        train_set.len(),
        held,
        corpus.facts().len()
    );
    Ok(StudySetup {
        dataset,
        held,
        corpus,
        index,
    })
}

impl StudySetup {
    fn train_set(&self) -> &[TrainingRecord] {
        &self.dataset[..self.dataset.len() - self.held]
    }

    fn eval_set(&self) -> &[TrainingRecord] {
        &self.dataset[self.dataset.len() - self.held..]
    }
}

/// Rewrites the output artifact with all rows completed so far, so an
/// aborted run still leaves a valid partial file behind.
fn persist_rows<T: Serialize>(output: Option<&Path>, rows: &mut Vec<String>, row: &T) {
    match serde_json::to_string(row) {
        Ok(line) => rows.push(line),
        Err(err) => {
            eprintln!("error: failed to serialize row: {err}");
            return;
        }
    }
    match output {
        Some(path) => {
            let mut data = rows.join("\n");
            data.push('\n');
            if let Err(err) = atomic_write(path, data.as_bytes()) {
                eprintln!("error: failed to persist rows: {err}");
            }
        }
        None => println!("{}", rows.last().expect("just pushed")),
    }
}

fn run_ablate(args: AblateArgs) -> CliResult {
    let lexicon = load_lexicon_or_default(args.lexicon.as_deref())?;
    let base = load_config_or_default(args.config.as_deref(), Some(args.seed))?;
    let setup = prepare_study(args.data.as_deref(), args.n, args.held_out, &lexicon, &base)?;
    let mut persisted: Vec<String> = Vec::new();
    let rows = ablate(
        setup.train_set(),
        setup.eval_set(),
        &setup.corpus,
        &setup.index,
        &lexicon,
        &base,
        |row| {
            eprintln!("row {} done: ce_f1 {:.4}, mean_reward {:.4}", row.name, row.ce_f1, row.mean_reward);
            persist_rows(args.output.as_deref(), &mut persisted, row);
        },
    )?;
    eprint!("{}", ablation_table(&rows));
    Ok(())
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<10} {:>5} {:>5} {:>6} {:>6}  {:>8} {:>8} {:>8} {:>8} {:>8} {:>11}",
        "name", "mke", "rl", "r_dis", "r_sen", "ce_prec", "ce_rec", "ce_f1", "bleu_4", "rouge_l", "mean_reward"
    );
    for row in rows {
        let _ = writeln!(
            table,
            "{:<10} {:>5} {:>5} {:>6} {:>6}  {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>11.4}",
            row.name,
            row.use_mke,
            row.use_rl,
            row.use_r_dis,
            row.use_r_sen,
            row.ce_precision,
            row.ce_recall,
            row.ce_f1,
            row.bleu_4,
            row.rouge_l,
            row.mean_reward
        );
    }
    table
}

fn run_sweep_alpha(args: SweepAlphaArgs) -> CliResult {
    let lexicon = load_lexicon_or_default(args.lexicon.as_deref())?;
    let base = load_config_or_default(args.config.as_deref(), Some(args.seed))?;
    let setup = prepare_study(args.data.as_deref(), args.n, args.held_out, &lexicon, &base)?;
    let mut persisted: Vec<String> = Vec::new();
    let points = sweep_alpha(
        setup.train_set(),
        setup.eval_set(),
        &setup.corpus,
        &setup.index,
        &lexicon,
        &base,
        &args.values,
        |point| {
            eprintln!(
                "alpha {:.2} done: ce_f1 {:.4}, bleu_4 {:.4}",
                point.alpha, point.ce_f1, point.bleu_4
            );
            persist_rows(args.output.as_deref(), &mut persisted, point);
        },
    )?;
    let mut table = String::new();
    let _ = writeln!(table, "{:>5} {:>8} {:>8}", "alpha", "ce_f1", "bleu_4");
    for AlphaPoint { alpha, ce_f1, bleu_4 } in &points {
        let _ = writeln!(table, "{alpha:>5.2} {ce_f1:>8.4} {bleu_4:>8.4}");
    }
    eprint!("{table}");
    Ok(())
}
