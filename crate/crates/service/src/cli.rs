use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sourceconf_core::annotator::{
    annotate, build_prompt, request_hash, AnnotateOptions, AnnotationCache, Backend, MockBackend,
};
use sourceconf_core::attribution::{read_pharaoh, Aggregation, AttributionConfig, Norm};
use sourceconf_core::checkpoint::{Calibration, Checkpoint};
use sourceconf_core::corpus::{read_parallel, read_testset, read_tsv, SentencePair};
use sourceconf_core::evaluation::{export_curves, read_curve_csv, MetricsReport};
use sourceconf_core::pipeline::{annotation_requests, candidates, evaluate_all, labels_from_records};
use sourceconf_core::suggestions::{build_index, DEFAULT_MIN_FREQUENCY};
use sourceconf_core::synthetic::{run_benchmark, LexiconEntry, OracleBackend, SyntheticConfig, WordKind};
use sourceconf_core::train::{train_model, TrainConfig};
use sourceconf_core::{Decoding, Error, Execution, Result};

use crate::config::ServiceConfig;
use crate::live::{ChatBackend, DEFAULT_ENDPOINT, DEFAULT_KEY_VAR};
use crate::plot::{write_panels, Series};
use crate::server::{serve, AppState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sourceconf", version, about = "Source-side confidence estimation for machine translation")]
pub struct Cli {
    /// Run every data-parallel step on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a subword model and transformer on a parallel corpus.
    Train(TrainArgs),
    /// Annotate candidate translations of a test set with an LLM backend.
    Annotate(AnnotateArgs),
    /// Score a test set with every method against cached annotations.
    Evaluate(EvaluateArgs),
    /// Build the suggestion index from source-side corpus text.
    BuildIndex(BuildIndexArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Render PR and ROC panels from exported curve CSVs.
    Curves(CurvesArgs),
    /// Run the synthetic end-to-end benchmark.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Tab-separated source/target corpus.
    #[arg(long, conflicts_with_all = ["source", "target"])]
    pub corpus: Option<PathBuf>,
    /// Source side of a line-aligned corpus.
    #[arg(long, requires = "target")]
    pub source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    pub target: Option<PathBuf>,
    /// JSON training configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendKind {
    Mock,
    Openai,
    Oracle,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON Lines of {"source", "reference"}.
    #[arg(long)]
    pub testset: PathBuf,
    /// JSON Lines annotation cache.
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, default_value = "English")]
    pub source_lang: String,
    #[arg(long, default_value = "German")]
    pub target_lang: String,
    /// Beam width; greedy decoding when absent.
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    /// Chat completions endpoint (openai backend).
    #[arg(long, default_value = DEFAULT_ENDPOINT)]
    pub endpoint: String,
    /// Model snapshot tag (openai backend).
    #[arg(long, default_value = "gpt-4o-2024-08-06")]
    pub model: String,
    /// Environment variable holding the API key (openai backend).
    #[arg(long, default_value = DEFAULT_KEY_VAR)]
    pub key_var: String,
    /// JSON object mapping source sentences to scripted replies (mock backend).
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// Lexicon written by `benchmark` (oracle backend).
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
    #[arg(long, default_value_t = 3)]
    pub attempts: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// Snapshot tag the cache was filled with; inferred when the cache holds one.
    #[arg(long)]
    pub snapshot: Option<String>,
    /// Gold source-candidate alignments in Pharaoh format, one line per sentence.
    #[arg(long)]
    pub alignments: Option<PathBuf>,
    #[arg(long, default_value = "l1")]
    pub norm: Norm,
    #[arg(long, default_value = "sum")]
    pub aggregation: Aggregation,
    /// Directory for reports, curve CSVs and the summary.
    #[arg(long)]
    pub out: PathBuf,
    /// Do not store the gradient max-F1 threshold with the checkpoint.
    #[arg(long)]
    pub no_calibrate: bool,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Plain text (one sentence per line) or a `.tsv` corpus, whose source column is used.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MIN_FREQUENCY)]
    pub min_frequency: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// JSON service configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<SocketAddr>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    /// Directory holding `{method}_pr.csv` files.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory for `pr.svg` and `roc.svg`; defaults to the input directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Failure of a verb, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numerical { .. } => EXIT_NUMERICAL,
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

fn data_error(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_DATA, message: message.into() }
}

fn exec(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn decoding(beam: Option<usize>) -> Decoding {
    match beam {
        Some(w) if w > 1 => Decoding::Beam(w),
        _ => Decoding::Greedy,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&raw).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value).expect("value serializes");
    json.push('\n');
    std::fs::write(path, json).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn train(args: &TrainArgs, exec: Execution) -> Result<(), Failure> {
    let pairs: Vec<SentencePair> = match (&args.corpus, &args.source, &args.target) {
        (Some(c), _, _) => read_tsv(c)?,
        (None, Some(s), Some(t)) => read_parallel(s, t)?,
        _ => return Err(Failure { code: EXIT_USAGE, message: "give --corpus or --source and --target".into() }),
    };
    let mut config: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(v) = args.vocab_size {
        config.vocab_size = v;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let (checkpoint, report) = train_model(&pairs, &config, exec)?;
    checkpoint.save(&args.out)?;
    write_json(&args.out.join("train_report.json"), &report)?;
    println!(
        "trained {} steps; validation perplexity {:.3} -> {:.3} (uniform {:.1}); checkpoint {} at {}",
        report.steps,
        report.initial_validation_perplexity,
        report.final_validation_perplexity,
        report.uniform_perplexity,
        checkpoint.id(),
        args.out.display()
    );
    Ok(())
}

fn mock_backend(responses: Option<&Path>) -> Result<MockBackend> {
    let mut backend = MockBackend::new().no_errors_by_default();
    if let Some(p) = responses {
        let script: HashMap<String, String> = read_json(p)?;
        for (source, reply) in &script {
            backend = backend.respond(source, reply);
        }
    }
    Ok(backend)
}

fn oracle_backend(lexicon: Option<&Path>) -> Result<OracleBackend, Failure> {
    let path = lexicon.ok_or(Failure { code: EXIT_USAGE, message: "the oracle backend needs --lexicon".into() })?;
    let entries: Vec<LexiconEntry> = read_json(path)?;
    Ok(OracleBackend::new(entries.into_iter().filter(|e| e.kind != WordKind::Regular).map(|e| e.source).collect()))
}

fn annotate_verb(args: &AnnotateArgs, exec: Execution) -> Result<(), Failure> {
    let p = &args.prompt;
    let checkpoint = Checkpoint::load(&p.checkpoint)?;
    let items = read_testset(&p.testset)?;
    let cands = candidates(&checkpoint, &items, decoding(p.beam), exec)?;
    let requests = annotation_requests(&items, &cands, &p.source_lang, &p.target_lang);
    let backend: Box<dyn Backend> = match args.backend {
        BackendKind::Mock => Box::new(mock_backend(args.responses.as_deref())?),
        BackendKind::Openai => Box::new(ChatBackend::from_env(&args.endpoint, &args.model, &args.key_var)?),
        BackendKind::Oracle => Box::new(oracle_backend(args.lexicon.as_deref())?),
    };
    let cache = Mutex::new(AnnotationCache::open(&p.cache)?);
    let opts = AnnotateOptions { attempts: args.attempts, parallelism: args.parallelism.max(1), exec, ..Default::default() };
    let (records, stats) = annotate(&requests, backend.as_ref(), &cache, &opts)?;
    let errors: usize = records.iter().map(|r| r.triples.len()).sum();
    println!(
        "annotated {} sentences with {} ({}): {} cache hits, {} backend calls, {} failed, {} parse warnings, {} error triples",
        records.len(),
        backend.id(),
        backend.snapshot(),
        stats.cache_hits,
        stats.backend_calls,
        stats.failed,
        stats.parse_warnings,
        errors
    );
    if stats.failed > 0 {
        return Err(data_error(format!("{} sentences could not be annotated; rerun to retry them", stats.failed)));
    }
    Ok(())
}

fn evaluate_verb(args: &EvaluateArgs, exec: Execution) -> Result<(), Failure> {
    let p = &args.prompt;
    let checkpoint = Checkpoint::load(&p.checkpoint)?;
    let items = read_testset(&p.testset)?;
    let cache = AnnotationCache::open(&p.cache)?;
    let snapshot = match &args.snapshot {
        Some(s) => s.clone(),
        None => {
            let found = cache.snapshots();
            if found.len() != 1 {
                return Err(data_error(format!(
                    "cache holds {} snapshot tags ({:?}); pass --snapshot",
                    found.len(),
                    found
                )));
            }
            found.into_iter().next().expect("one snapshot").to_string()
        }
    };
    let cands = candidates(&checkpoint, &items, decoding(p.beam), exec)?;
    let requests = annotation_requests(&items, &cands, &p.source_lang, &p.target_lang);
    let mut records = Vec::with_capacity(requests.len());
    for (i, r) in requests.iter().enumerate() {
        let hash = request_hash(&snapshot, &build_prompt(r));
        let record = cache.get(&hash).ok_or_else(|| {
            data_error(format!(
                "no annotation for test sentence {} ({:?}) under snapshot {snapshot}; run annotate with the same settings",
                i + 1,
                r.source
            ))
        })?;
        records.push(record.clone());
    }
    let (labels, unresolved) = labels_from_records(&cands, &records)?;
    let alignments = match &args.alignments {
        Some(path) => Some(read_pharaoh(path, &source_target_lengths(&cands))?),
        None => None,
    };
    let config = AttributionConfig { norm: args.norm, aggregation: args.aggregation, ..Default::default() };
    let reports = evaluate_all(&checkpoint, &cands, &labels, unresolved, alignments.as_deref(), config, exec)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    write_json(&args.out.join("reports.json"), &reports)?;
    export_curves(&reports, &args.out)?;
    print_table(&reports);
    if unresolved > 0 {
        log::warn!("{unresolved} annotated errors could not be placed on a source word");
    }
    if !args.no_calibrate {
        let gradient = reports.iter().find(|r| r.method == "gradient").expect("gradient is always evaluated");
        let calibration = Calibration {
            method: gradient.method.clone(),
            threshold: gradient.threshold_at_max_f1.max(0.0),
            max_f1: gradient.max_f1,
        };
        Checkpoint::save_calibration(&p.checkpoint, &calibration)?;
        println!("stored threshold {} with {}", calibration.threshold, p.checkpoint.display());
    }
    Ok(())
}

fn source_target_lengths(cands: &[sourceconf_core::pipeline::Candidate]) -> Vec<(usize, usize)> {
    cands.iter().map(|c| (c.source.num_words(), c.translation.sentence.num_words())).collect()
}

fn print_table(reports: &[MetricsReport]) {
    println!("{:<24} {:>8} {:>8} {:>8} {:>12}", "method", "max_f1", "auc_pr", "auc_roc", "threshold");
    for r in reports {
        println!(
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>12.4}",
            r.method, r.max_f1, r.auc_pr, r.auc_roc, r.threshold_at_max_f1
        );
    }
}

fn build_index_verb(args: &BuildIndexArgs) -> Result<(), Failure> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let corpus: Vec<String> = if args.corpus.extension().is_some_and(|e| e == "tsv") {
        read_tsv(&args.corpus)?.into_iter().map(|p| p.source).collect()
    } else {
        let raw = std::fs::read_to_string(&args.corpus).map_err(|e| Error::Io { path: args.corpus.clone(), source: e })?;
        raw.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
    };
    let index = build_index(&corpus, &checkpoint, args.min_frequency)?;
    if index.is_empty() {
        return Err(data_error(format!("no word occurs at least {} times", args.min_frequency)));
    }
    index.save(&args.out)?;
    println!("indexed {} words (dim {}) as {} at {}", index.len(), index.meta.dim, index.id(), args.out.display());
    Ok(())
}

/// File config, then `SOURCECONF_*` variables, then flags.
pub fn service_config<I>(args: &ServeArgs, env: I) -> Result<ServiceConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let base = match &args.config {
        Some(p) => ServiceConfig::from_file(p)?,
        None => ServiceConfig::default(),
    };
    let mut config = base.with_env(env)?;
    if let Some(c) = &args.checkpoint {
        config.checkpoint = Some(c.clone());
    }
    if let Some(i) = &args.index {
        config.index = Some(i.clone());
    }
    if let Some(b) = args.bind {
        config.bind = b;
    }
    if let Some(t) = args.threshold {
        config.threshold = Some(t);
    }
    if let Some(k) = args.k {
        config.k = k;
    }
    Ok(config)
}

fn serve_verb(args: &ServeArgs) -> Result<(), Failure> {
    let config = service_config(args, std::env::vars())?;
    let state = AppState::load(config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| data_error(format!("cannot start runtime: {e}")))?;
    runtime
        .block_on(serve(state, |addr| {
            println!("listening on http://{addr}");
            let _ = std::io::stdout().flush();
        }))
        .map_err(|e| data_error(format!("server failed: {e}")))
}

fn curves_verb(args: &CurvesArgs) -> Result<(), Failure> {
    let mut found: Vec<(String, PathBuf)> = std::fs::read_dir(&args.input)
        .map_err(|e| Error::Io { path: args.input.clone(), source: e })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter_map(|path| {
            let name = path.file_name()?.to_str()?.strip_suffix("_pr.csv")?.to_string();
            Some((name, path))
        })
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(data_error(format!("no *_pr.csv files in {}", args.input.display())));
    }
    let curves = found
        .iter()
        .map(|(name, path)| Ok((name.clone(), read_curve_csv(path)?)))
        .collect::<Result<Vec<_>>>()?;
    let series: Vec<Series> = curves.iter().map(|(label, points)| Series { label, points }).collect();
    let out = args.out.as_deref().unwrap_or(&args.input);
    for path in write_panels(&series, out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn benchmark_verb(args: &BenchmarkArgs, exec: Execution) -> Result<(), Failure> {
    let mut config = SyntheticConfig::default();
    if let Some(s) = args.seed {
        config.seed = s;
        config.train.seed = s;
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    let (outcome, artifacts) = run_benchmark(&config, Some(&args.out.join("cache.jsonl")), exec)?;
    artifacts.write(&args.out)?;
    let metrics = args.out.join("metrics");
    std::fs::create_dir_all(&metrics).map_err(|e| Error::Io { path: metrics.clone(), source: e })?;
    write_json(&metrics.join("reports.json"), &outcome.reports)?;
    export_curves(&outcome.reports, &metrics)?;
    println!(
        "{} test sentences, {} words, {} mistranslated, {} exact translations, {:.1}s",
        outcome.sentences, outcome.words, outcome.mistranslated_words, outcome.exact_translations, outcome.seconds
    );
    print_table(&outcome.reports);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let exec = exec(cli);
    match &cli.command {
        Command::Train(a) => train(a, exec),
        Command::Annotate(a) => annotate_verb(a, exec),
        Command::Evaluate(a) => evaluate_verb(a, exec),
        Command::BuildIndex(a) => build_index_verb(a),
        Command::Serve(a) => serve_verb(a),
        Command::Curves(a) => curves_verb(a),
        Command::Benchmark(a) => benchmark_verb(a, exec),
    }
}

/// Parses `args` and runs the verb, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
