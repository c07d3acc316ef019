use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use personaeval::analysis::{self, AnalysisError};
use personaeval::backends::{BackendError, BackendSuite, BackendsConfig, MockBackend};
use personaeval::cache::CallCache;
use personaeval::config::{parse_metric_list, EvalConfig};
use personaeval::data::{load_manifest, ManifestLine};
use personaeval::eval::{self, EvalError};
use personaeval::identity::{self, TrainOptions};
use personaeval::prompts::{self, FpsStart, LexiconTagger, PromptError, ProximityFilter, StatsOptions, TemplateGrammar};
use personaeval::report::{write_output, Format, MetricReport};

#[derive(Parser)]
#[command(name = "personaeval", version, about = "Evaluate personalized text-to-image outputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a manifest's samples and write a report.
    Eval(EvalArgs),
    /// Kendall tau-b between report metrics and human votes.
    Correlate(CorrelateArgs),
    /// Expand a template grammar and optionally subsample it.
    Promptgen(PromptgenArgs),
    /// Corpus statistics as JSON.
    Stats(StatsArgs),
    /// Assign prompts to subjects.
    Pair(PairArgs),
    /// Fit attribute probes on the subject images of a manifest.
    TrainBank(TrainBankArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated metric list overriding the config.
    #[arg(long)]
    metrics: Option<String>,
    #[arg(long)]
    backends: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// json, csv or markdown; guessed from --out otherwise.
    #[arg(long)]
    format: Option<String>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    votes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct PromptgenArgs {
    #[arg(long)]
    grammar: PathBuf,
    /// Subset size; every expansion is written when omitted.
    #[arg(long)]
    k: Option<usize>,
    /// Draws the first point at random instead of nearest the centroid.
    #[arg(long)]
    seed: Option<u64>,
    /// Reference corpus for the proximity filter.
    #[arg(long, requires = "max_distance")]
    reference: Option<PathBuf>,
    #[arg(long, requires = "reference")]
    max_distance: Option<f64>,
    /// Backends file supplying the sentence embedder; a hashed mock otherwise.
    #[arg(long)]
    backends: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Word list with `word VERB|NOUN` lines.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    backends: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    subjects: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    per_subject: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainBankArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    backends: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value = "unspecified")]
    source_dataset: String,
}

enum Failure {
    Usage(String),
    Data(String),
    Backend(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Backend(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Backend(m) => m,
        }
    }
}

fn data(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        Failure::Backend(e.to_string())
    }
}

impl From<PromptError> for Failure {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Backend(b) => b.into(),
            other => data(other),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        if e.is_backend() {
            Failure::Backend(e.to_string())
        } else {
            data(e)
        }
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        data(e)
    }
}

type Outcome = Result<(), Failure>;

fn format_for(explicit: Option<&str>, out: &Path) -> Result<Format, Failure> {
    match explicit {
        Some(f) => f.parse().map_err(|e: personaeval::report::ReportError| Failure::Usage(e.to_string())),
        None => Ok(Format::from_path(out)),
    }
}

fn suite_or_mock(path: Option<&Path>) -> Result<BackendSuite, Failure> {
    Ok(match path {
        Some(p) => BackendsConfig::load_suite(p)?,
        None => BackendSuite::uniform(Arc::new(MockBackend::empty())),
    })
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => write_output(p, text).map_err(data),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(data),
    }
}

/// Prompt texts from a manifest (prompt lines) or from a plain file with one
/// sentence per line.
fn read_corpus(path: &Path) -> Result<Vec<String>, Failure> {
    let text = read(path)?;
    let jsonl = text.lines().find(|l| !l.trim().is_empty()).is_some_and(|l| l.trim_start().starts_with('{'));
    if !jsonl {
        return Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect());
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed: ManifestLine =
            serde_json::from_str(line).map_err(|e| data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if let ManifestLine::Prompt(p) = parsed {
            out.push(p.text);
        }
    }
    Ok(out)
}

/// Ids from a manifest's subject or prompt lines, or one id per line.
fn read_ids(path: &Path, want_subjects: bool) -> Result<Vec<String>, Failure> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        if !line.trim_start().starts_with('{') {
            out.push(line.trim().to_string());
            continue;
        }
        let parsed: ManifestLine =
            serde_json::from_str(line).map_err(|e| data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        match parsed {
            ManifestLine::Subject(s) if want_subjects => out.push(s.subject_id),
            ManifestLine::Prompt(p) if !want_subjects => out.push(p.prompt_id),
            _ => {}
        }
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let format = format_for(a.format.as_deref(), &a.out)?;
    let manifest = load_manifest(&a.manifest).map_err(data)?;
    let mut config = match &a.config {
        Some(p) => EvalConfig::load(p).map_err(data)?,
        None => EvalConfig::default(),
    };
    if let Some(list) = &a.metrics {
        config.metrics = parse_metric_list(list).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let mut suite = BackendsConfig::load_suite(&a.backends)?;
    if let Some(dir) = &a.cache_dir {
        let cache = CallCache::open(dir).map_err(|e| data(format!("cache dir {}: {e}", dir.display())))?;
        suite = suite.with_cache(Arc::new(cache));
    }
    let report = eval::run_eval(&manifest, &config, &suite, a.workers)?;
    if let Some(cache) = suite.cache() {
        log::info!("cache: {} hits, {} misses", cache.hits(), cache.misses());
    }
    report.emit(format, &a.out).map_err(data)
}

fn cmd_correlate(a: CorrelateArgs) -> Outcome {
    let format = format_for(a.format.as_deref(), &a.out)?;
    let report = MetricReport::from_json(&read(&a.report)?).map_err(data)?;
    let votes = analysis::parse_votes(&read(&a.votes)?)?;
    let table = analysis::correlate(&report, &votes)?;
    let text = match format {
        Format::Json => table.canonical_json(),
        Format::Csv => table.to_csv(),
        Format::Markdown => table.to_markdown(),
    };
    write_output(&a.out, &text).map_err(data)
}

fn cmd_promptgen(a: PromptgenArgs) -> Outcome {
    let grammar = TemplateGrammar::load(&a.grammar)?;
    let expanded = prompts::expand_grammar(&grammar)?;
    let chosen: Vec<usize> = match a.k {
        None => (0..expanded.len()).collect(),
        Some(k) => {
            let suite = suite_or_mock(a.backends.as_deref())?;
            let rows = expanded
                .iter()
                .map(|p| suite.embed_sentence(&p.text))
                .collect::<Result<Vec<_>, _>>()?;
            let candidates = prompts::embedding_matrix(&rows)?;
            let reference = match &a.reference {
                Some(path) => {
                    let texts = read_corpus(path)?;
                    let rows = texts
                        .iter()
                        .map(|t| suite.embed_sentence(t))
                        .collect::<Result<Vec<_>, _>>()?;
                    Some(prompts::embedding_matrix(&rows)?)
                }
                None => None,
            };
            let filter = reference.as_ref().map(|r| ProximityFilter {
                reference: r.view(),
                max_distance: a.max_distance.expect("clap requires it"),
            });
            let start = a.seed.map_or(FpsStart::Centroid, FpsStart::Seeded);
            prompts::farthest_point_sample(candidates.view(), k, start, filter.as_ref(), a.workers)?
        }
    };
    let records: Vec<_> = chosen
        .iter()
        .map(|&i| expanded[i].clone().into_record(format!("p{i:06}")))
        .collect();
    let text = prompts::prompts_to_manifest(&records, grammar.theme_registry());
    write_output(&a.out, &text).map_err(data)
}

fn cmd_stats(a: StatsArgs) -> Outcome {
    let corpus = read_corpus(&a.corpus)?;
    let reference = a.reference.as_deref().map(read_corpus).transpose()?;
    let tagger = match &a.lexicon {
        Some(p) => LexiconTagger::parse(&read(p)?)?,
        None => LexiconTagger::default(),
    };
    let suite = suite_or_mock(a.backends.as_deref())?;
    let opts = StatsOptions {
        seed: a.seed,
        ..Default::default()
    };
    let stats = prompts::corpus_stats(&corpus, &tagger, &suite, reference.as_deref(), &opts)?;
    let value = serde_json::to_value(&stats).map_err(data)?;
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&value).map_err(data)? + "\n"))
}

fn cmd_pair(a: PairArgs) -> Outcome {
    let subjects = read_ids(&a.subjects, true)?;
    let prompt_ids = read_ids(&a.prompts, false)?;
    let pairing = prompts::pair_subjects_prompts(&subjects, &prompt_ids, a.per_subject, a.seed)?;
    let text = serde_json::to_string_pretty(&pairing).map_err(data)? + "\n";
    emit(a.out.as_deref(), &text)
}

fn cmd_train_bank(a: TrainBankArgs) -> Outcome {
    let manifest = load_manifest(&a.manifest).map_err(data)?;
    let suite = BackendsConfig::load_suite(&a.backends)?;
    let names = manifest.header.attribute_names.clone();
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    let mut seen = BTreeSet::new();
    for subject in &manifest.subjects {
        for image in &subject.image_refs {
            if !seen.insert(image.clone()) {
                continue;
            }
            let faces = suite.detect_faces(image)?;
            let Some(face) = faces.first() else {
                log::warn!("no face in {image}; skipped");
                continue;
            };
            embeddings.push(face.embedding.clone());
            labels.push(names.iter().map(|n| subject.attribute_labels[n]).collect::<Vec<u8>>());
        }
    }
    let opts = TrainOptions {
        seed: a.seed,
        epochs: a.epochs,
        source_dataset: a.source_dataset,
        embedder_identity: suite.identities().get("face_embedder").cloned().unwrap_or_default(),
        ..Default::default()
    };
    let bank = identity::train_attribute_classifiers(&embeddings, &labels, &names, &opts).map_err(data)?;
    bank.save(&a.out).map_err(data)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Eval(a) => cmd_eval(a),
        Command::Correlate(a) => cmd_correlate(a),
        Command::Promptgen(a) => cmd_promptgen(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Pair(a) => cmd_pair(a),
        Command::TrainBank(a) => cmd_train_bank(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
