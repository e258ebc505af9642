//! `d2s` command line: prep, synth, train, eval, predict, compare.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. Settings resolve as
//! command-line flag, then `--config` file (TOML, or JSON by `.json`
//! extension), then built-in default.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Planting, RawDocument, SynthConfig};
use crate::encoder::{EmbeddingStore, DEFAULT_HIDDEN, DEFAULT_VOCAB_CAP};
use crate::metrics::MetricsReport;
use crate::pipeline::{self, PipelineConfig, DEFAULT_LABELS_TOP_K};
use crate::textprep::{
    self, ChunkPolicy, DEFAULT_DOC_TOKEN_LIMIT, DEFAULT_HEAD_LEN, DEFAULT_HEAD_TAIL, DEFAULT_MAX_CHUNKS,
    DEFAULT_TAIL_LEN, DEFAULT_WORDS_PER_CHUNK,
};
use crate::trainer::{self, TrainConfig, REFERENCE_LEARNING_RATE, STORE_LEARNING_RATE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
/// Caps the worker thread count.
pub const THREADS_ENV: &str = "D2S_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(
    corpus::CorpusError,
    crate::encoder::StoreError,
    trainer::TrainError,
    pipeline::PipelineError,
    crate::metrics::MetricsError
);

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "d2s", about = "Chunked long-document multi-label classification", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize and chunk a corpus into a chunk file (one valid chunk per line).
    Prep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus with planted marker tokens.
    Synth(SynthArgs),
    /// Train on the training split and write a checkpoint plus a training log.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Training log path (default: <checkpoint>.log.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also write the held-out test split as JSONL.
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every document of a corpus.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Predicted codes, scores and per-chunk attention for every document.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        /// Output JSONL (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and test every chunk policy on one shared split.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum PolicyKind {
    D2s,
    Head,
    Tail,
    #[value(name = "head_tail")]
    HeadTail,
}

/// Flags shared by the pipeline subcommands. Every field is optional so that
/// config-file values can fill the gaps.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CommonArgs {
    /// TOML or JSON file with default settings.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    words_per_chunk: Option<usize>,
    #[arg(long)]
    max_chunks: Option<usize>,
    #[arg(long)]
    head_len: Option<usize>,
    #[arg(long)]
    tail_len: Option<usize>,
    #[arg(long)]
    doc_token_limit: Option<usize>,
    #[arg(long)]
    labels_top_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    vocab_cap: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    keep_unlabeled: Option<bool>,
}

impl CommonArgs {
    /// Fills unset fields from the config file named by `--config`.
    fn merged(self) -> CliResult<CommonArgs> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let file: CommonArgs = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        };
        macro_rules! pick {
            ($($f:ident),*) => { CommonArgs { config: self.config, $($f: self.$f.or(file.$f)),* } };
        }
        Ok(pick!(
            corpus, embeddings, policy, words_per_chunk, max_chunks, head_len, tail_len, doc_token_limit,
            labels_top_k, seed, lr, batch_size, epochs, patience, hidden, vocab_cap, checkpoint, report,
            keep_unlabeled
        ))
    }

    fn policy_of(&self, kind: PolicyKind) -> ChunkPolicy {
        match kind {
            PolicyKind::D2s => ChunkPolicy::D2s {
                words_per_chunk: self.words_per_chunk.unwrap_or(DEFAULT_WORDS_PER_CHUNK),
                max_chunks: self.max_chunks.unwrap_or(DEFAULT_MAX_CHUNKS),
            },
            PolicyKind::Head => ChunkPolicy::Head { head_len: self.head_len.unwrap_or(DEFAULT_HEAD_LEN) },
            PolicyKind::Tail => ChunkPolicy::Tail { tail_len: self.tail_len.unwrap_or(DEFAULT_TAIL_LEN) },
            PolicyKind::HeadTail => ChunkPolicy::HeadTail {
                head_len: self.head_len.unwrap_or(DEFAULT_HEAD_TAIL.0),
                tail_len: self.tail_len.unwrap_or(DEFAULT_HEAD_TAIL.1),
            },
        }
    }

    fn policy(&self) -> CliResult<ChunkPolicy> {
        let policy = self.policy_of(self.policy.unwrap_or(PolicyKind::D2s));
        policy.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(policy)
    }

    fn pipeline(&self, store_mode: bool) -> CliResult<PipelineConfig> {
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            learning_rate: self.lr.unwrap_or(if store_mode { STORE_LEARNING_RATE } else { REFERENCE_LEARNING_RATE }),
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            max_epochs: self.epochs.unwrap_or(defaults.max_epochs),
            patience: self.patience.unwrap_or(defaults.patience),
            seed: self.seed.unwrap_or(defaults.seed),
            ..defaults
        };
        train.validate().map_err(CliError::Usage)?;
        let cfg = PipelineConfig {
            policy: self.policy()?,
            doc_token_limit: self.doc_token_limit.unwrap_or(DEFAULT_DOC_TOKEN_LIMIT),
            labels_top_k: self.labels_top_k.unwrap_or(DEFAULT_LABELS_TOP_K),
            keep_unlabeled: self.keep_unlabeled.unwrap_or(true),
            hidden: self.hidden.unwrap_or(DEFAULT_HIDDEN),
            vocab_cap: self.vocab_cap.unwrap_or(DEFAULT_VOCAB_CAP),
            train,
            ..PipelineConfig::default()
        };
        if cfg.labels_top_k == 0 || cfg.hidden == 0 || cfg.doc_token_limit == 0 {
            return Err(CliError::Usage("--labels-top-k, --hidden and --doc-token-limit must be at least 1".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_docs: usize,
    #[arg(long, default_value_t = 10)]
    n_labels: usize,
    #[arg(long, default_value_t = 600)]
    min_len: usize,
    #[arg(long, default_value_t = 1500)]
    max_len: usize,
    /// `uniform` or `beyond:<p>` (markers only at token index >= p).
    #[arg(long, default_value = "uniform", value_parser = parse_planting)]
    planting: Planting,
    #[arg(long, default_value_t = 500)]
    filler_vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_planting(s: &str) -> Result<Planting, String> {
    if s == "uniform" {
        return Ok(Planting::Uniform);
    }
    s.strip_prefix("beyond:")
        .and_then(|p| p.parse().ok())
        .map(Planting::BeyondPrefix)
        .ok_or_else(|| format!("expected `uniform` or `beyond:<p>`, got {s:?}"))
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value.as_deref().ok_or_else(|| CliError::Usage(format!("missing required flag {flag}")))
}

fn require_input<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    let path = require(value, flag)?;
    if !path.exists() {
        return Err(CliError::Data(format!("{}: input file does not exist ({flag})", path.display())));
    }
    Ok(path)
}

fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Writes the report as JSON to `path` and as a table to `<path>.txt`.
pub fn emit_report(report: &MetricsReport, path: &Path) -> io::Result<()> {
    let json = serde_json::to_string_pretty(report).expect("reports serialize");
    fs::write(path, json + "\n").map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let table_path = table_path(path);
    fs::write(&table_path, report.to_table())
        .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", table_path.display())))
}

pub fn table_path(report_path: &Path) -> PathBuf {
    let mut s = report_path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

fn load_store(common: &CommonArgs) -> CliResult<Option<EmbeddingStore>> {
    match &common.embeddings {
        Some(_) => {
            let path = require_input(&common.embeddings, "--embeddings")?;
            let store = EmbeddingStore::read(path).map_err(|e| match e {
                crate::encoder::StoreError::Io { .. } => CliError::Data(e.to_string()),
                _ => CliError::Data(format!("{}: {e}", path.display())),
            })?;
            Ok(Some(store))
        }
        None => Ok(None),
    }
}

fn cmd_prep(common: CommonArgs, out: &Path) -> CliResult<()> {
    let corpus_path = require_input(&common.corpus, "--corpus")?;
    let policy = common.policy()?;
    let limit = common.doc_token_limit.unwrap_or(DEFAULT_DOC_TOKEN_LIMIT);
    let docs = corpus::ingest(corpus_path)?;
    let mut chunked = Vec::with_capacity(docs.len());
    for doc in &docs {
        let tokens = textprep::truncate_head(&textprep::normalize(&doc.text), limit);
        let c = textprep::chunk(&doc.doc_id, &tokens, &policy).map_err(|source| {
            CliError::Data(format!("{}: document {:?}: {source}", corpus_path.display(), doc.doc_id))
        })?;
        chunked.push(c);
    }
    let n = corpus::write_chunk_file(out, &chunked)?;
    eprintln!("wrote {n} chunks from {} documents to {}", chunked.len(), out.display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    if args.n_labels == 0 || args.min_len == 0 || args.min_len > args.max_len || args.filler_vocab == 0 {
        return Err(CliError::Usage("need --n-labels >= 1, 1 <= --min-len <= --max-len, --filler-vocab >= 1".into()));
    }
    let docs = corpus::synth_generate(&SynthConfig {
        n_docs: args.n_docs,
        n_labels: args.n_labels,
        min_len: args.min_len,
        max_len: args.max_len,
        planting: args.planting,
        filler_vocab: args.filler_vocab,
        seed: args.seed,
    });
    corpus::write_jsonl(&args.out, &docs)?;
    Ok(())
}

fn cmd_train(common: CommonArgs, log: Option<PathBuf>, test_out: Option<PathBuf>) -> CliResult<()> {
    let corpus_path = require_input(&common.corpus, "--corpus")?;
    let ckpt_path = require(&common.checkpoint, "--checkpoint")?.to_owned();
    let store = load_store(&common)?;
    let cfg = common.pipeline(store.is_some())?;
    let docs = corpus::ingest(corpus_path)?;
    let split = pipeline::split_documents(docs, &cfg);
    let data = pipeline::prepare_split(&split, &cfg)?;
    let outcome = pipeline::fit_prepared(&data, &cfg, store.as_ref())?;
    trainer::save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    let log_path = log.unwrap_or_else(|| {
        let mut s = ckpt_path.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let mut text = String::new();
    for entry in &outcome.log {
        text.push_str(&serde_json::to_string(entry).expect("log entries serialize"));
        text.push('\n');
    }
    fs::write(&log_path, text).map_err(|e| io_error(&log_path, e))?;
    if let Some(path) = test_out {
        corpus::write_jsonl(&path, &split.test)?;
    }
    eprintln!(
        "best validation micro-F1 {:.5} at epoch {} ({} epochs run); checkpoint {}",
        outcome.checkpoint.best_validation_micro_f1,
        outcome.checkpoint.epoch,
        outcome.log.len(),
        ckpt_path.display()
    );
    Ok(())
}

/// Vectorizes a corpus under a checkpoint's label vocabulary and chunk policy.
fn checkpoint_dataset(
    ckpt: &trainer::Checkpoint,
    docs: &[RawDocument],
) -> CliResult<Vec<corpus::LabeledExample>> {
    Ok(corpus::vectorize_all(docs, &ckpt.label_vocab, &ckpt.policy, ckpt.doc_token_limit, true)?)
}

fn cmd_eval(common: CommonArgs) -> CliResult<()> {
    let ckpt = trainer::load_checkpoint(require_input(&common.checkpoint, "--checkpoint")?)?;
    let corpus_path = require_input(&common.corpus, "--corpus")?;
    let report_path = require(&common.report, "--report")?;
    let store = load_store(&common)?;
    let dataset = checkpoint_dataset(&ckpt, &corpus::ingest(corpus_path)?)?;
    let report = trainer::evaluate(&ckpt, &dataset, store.as_ref())?;
    emit_report(&report, report_path).map_err(|e| CliError::Data(e.to_string()))?;
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Debug, Serialize)]
struct LabelPrediction<'a> {
    code: &'a str,
    score: f64,
    predicted: bool,
    /// Weight of each valid chunk, in chunk order.
    attention: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct DocumentPrediction<'a> {
    doc_id: &'a str,
    codes: Vec<&'a str>,
    labels: Vec<LabelPrediction<'a>>,
}

fn cmd_predict(common: CommonArgs, out: Option<PathBuf>) -> CliResult<()> {
    let ckpt = trainer::load_checkpoint(require_input(&common.checkpoint, "--checkpoint")?)?;
    let corpus_path = require_input(&common.corpus, "--corpus")?;
    let store = load_store(&common)?;
    let dataset = checkpoint_dataset(&ckpt, &corpus::ingest(corpus_path)?)?;
    let outputs = trainer::predict_all(&ckpt.model, &dataset, store.as_ref())?;
    let threshold = ckpt.config.threshold;
    let mut sink: Box<dyn Write> = match &out {
        Some(path) => Box::new(BufWriter::new(fs::File::create(path).map_err(|e| io_error(path, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let out_name = out.as_deref().unwrap_or(Path::new("<stdout>"));
    for (ex, o) in dataset.iter().zip(&outputs) {
        let labels: Vec<LabelPrediction<'_>> = ckpt
            .label_vocab
            .labels()
            .iter()
            .enumerate()
            .map(|(i, code)| LabelPrediction {
                code,
                score: o.scores.scores[i],
                predicted: o.scores.scores[i] > threshold,
                attention: (0..o.attention.n).filter(|&j| o.attention.valid_mask[j]).map(|j| o.attention.row(i)[j]).collect(),
            })
            .collect();
        let record = DocumentPrediction {
            doc_id: &ex.doc_id,
            codes: labels.iter().filter(|l| l.predicted).map(|l| l.code).collect(),
            labels,
        };
        writeln!(sink, "{}", serde_json::to_string(&record).expect("predictions serialize"))
            .map_err(|e| io_error(out_name, e))?;
    }
    sink.flush().map_err(|e| io_error(out_name, e))
}

fn cmd_compare(common: CommonArgs) -> CliResult<()> {
    if common.embeddings.is_some() {
        return Err(CliError::Usage("compare trains the reference encoder; --embeddings is not supported".into()));
    }
    let corpus_path = require_input(&common.corpus, "--corpus")?;
    let report_path = require(&common.report, "--report")?.to_owned();
    let cfg = common.pipeline(false)?;
    let policies: Vec<ChunkPolicy> =
        [PolicyKind::D2s, PolicyKind::Head, PolicyKind::Tail, PolicyKind::HeadTail].map(|k| common.policy_of(k)).into();
    for p in &policies {
        p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let comparison = pipeline::compare_policies(corpus::ingest(corpus_path)?, &cfg, &policies)?;
    let json = serde_json::to_string_pretty(&comparison).expect("comparisons serialize");
    fs::write(&report_path, json + "\n").map_err(|e| io_error(&report_path, e))?;
    let table = table_path(&report_path);
    fs::write(&table, comparison.to_table()).map_err(|e| io_error(&table, e))?;
    print!("{}", comparison.to_table());
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        // Already-initialized pools (repeated calls in one process) keep their size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Prep { common, out } => cmd_prep(common.merged()?, &out),
        Command::Synth(args) => cmd_synth(&args),
        Command::Train { common, log, test_out } => cmd_train(common.merged()?, log, test_out),
        Command::Eval { common } => cmd_eval(common.merged()?),
        Command::Predict { common, out } => cmd_predict(common.merged()?, out),
        Command::Compare { common } => cmd_compare(common.merged()?),
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("usage error: {msg}\n\nRun `d2s --help` for usage."),
                CliError::Data(msg) => eprintln!("error: {msg}"),
            }
            e.exit_code()
        }
    }
}
