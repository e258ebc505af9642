//! End-to-end runs: split a corpus, build vocabularies on the training part,
//! vectorize, train, and evaluate. Used by the CLI and by the experiment tests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, LabelVocabulary, LabeledExample, RawDocument, SplitRatios};
use crate::encoder::{EmbeddingStore, DEFAULT_HIDDEN, DEFAULT_VOCAB_CAP};
use crate::metrics::MetricsReport;
use crate::textprep::{ChunkPolicy, DEFAULT_DOC_TOKEN_LIMIT};
use crate::trainer::{self, EncoderMode, EpochLog, FitContext, FitOutcome, TrainConfig, TrainError};

pub const DEFAULT_LABELS_TOP_K: usize = 50;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("split produced an empty {0} set")]
    EmptySplit(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub policy: ChunkPolicy,
    pub doc_token_limit: usize,
    pub labels_top_k: usize,
    pub keep_unlabeled: bool,
    pub ratios: SplitRatios,
    /// Reference encoder width; ignored in store mode.
    pub hidden: usize,
    pub vocab_cap: usize,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            policy: ChunkPolicy::default(),
            doc_token_limit: DEFAULT_DOC_TOKEN_LIMIT,
            labels_top_k: DEFAULT_LABELS_TOP_K,
            keep_unlabeled: true,
            ratios: SplitRatios::default(),
            hidden: DEFAULT_HIDDEN,
            vocab_cap: DEFAULT_VOCAB_CAP,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub label_vocab: LabelVocabulary,
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Raw documents split with the training seed.
pub fn split_documents(docs: Vec<RawDocument>, cfg: &PipelineConfig) -> corpus::Split<RawDocument> {
    corpus::split(docs, cfg.ratios, cfg.train.seed)
}

pub fn prepare_split(split: &corpus::Split<RawDocument>, cfg: &PipelineConfig) -> Result<PreparedData, PipelineError> {
    let label_vocab = corpus::build_label_vocab(&split.train, cfg.labels_top_k)?;
    let vectorize = |docs: &[RawDocument]| {
        corpus::vectorize_all(docs, &label_vocab, &cfg.policy, cfg.doc_token_limit, cfg.keep_unlabeled)
    };
    let train = vectorize(&split.train)?;
    let validation = vectorize(&split.validation)?;
    let test = vectorize(&split.test)?;
    Ok(PreparedData { label_vocab, train, validation, test })
}

pub fn prepare(docs: Vec<RawDocument>, cfg: &PipelineConfig) -> Result<PreparedData, PipelineError> {
    prepare_split(&split_documents(docs, cfg), cfg)
}

pub fn fit_prepared(
    data: &PreparedData,
    cfg: &PipelineConfig,
    store: Option<&EmbeddingStore>,
) -> Result<FitOutcome, PipelineError> {
    let mode = match store {
        Some(s) => EncoderMode::Store(s),
        None => EncoderMode::Reference { h: cfg.hidden, vocab_cap: cfg.vocab_cap },
    };
    let ctx = FitContext {
        label_vocab: data.label_vocab.clone(),
        policy: cfg.policy,
        doc_token_limit: cfg.doc_token_limit,
    };
    Ok(trainer::fit(&data.train, &data.validation, mode, &cfg.train, &ctx)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRun {
    pub policy: ChunkPolicy,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDelta {
    pub policy: String,
    pub micro_f1_minus_baseline: f64,
    pub macro_f1_minus_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Name of the policy the deltas are measured against (the first one run).
    pub baseline: String,
    pub runs: Vec<PolicyRun>,
    pub deltas: Vec<PolicyDelta>,
}

impl Comparison {
    pub fn run_for(&self, name: &str) -> Option<&PolicyRun> {
        self.runs.iter().find(|r| r.policy.name() == name)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>10} {:>10} {:>10} {:>10}\n", "policy", "macro_f1", "micro_f1", "d_micro", "d_macro");
        for (run, delta) in self.runs.iter().zip(&self.deltas) {
            out.push_str(&format!(
                "{:<10} {:>10.5} {:>10.5} {:>+10.5} {:>+10.5}\n",
                run.policy.name(),
                run.test.macro_f1,
                run.test.micro_f1,
                delta.micro_f1_minus_baseline,
                delta.macro_f1_minus_baseline
            ));
        }
        out
    }
}

/// Trains and tests each policy on the same document split with the same seed.
///
/// Only the chunk policy differs between runs; label vocabulary, split and
/// training configuration are shared.
pub fn compare_policies(
    docs: Vec<RawDocument>,
    cfg: &PipelineConfig,
    policies: &[ChunkPolicy],
) -> Result<Comparison, PipelineError> {
    assert!(!policies.is_empty(), "at least one policy to compare");
    let split = split_documents(docs, cfg);
    let mut runs = Vec::with_capacity(policies.len());
    for &policy in policies {
        let run_cfg = PipelineConfig { policy, ..cfg.clone() };
        let data = prepare_split(&split, &run_cfg)?;
        if data.test.is_empty() {
            return Err(PipelineError::EmptySplit("test"));
        }
        let outcome = fit_prepared(&data, &run_cfg, None)?;
        let test = trainer::evaluate(&outcome.checkpoint, &data.test, None)?;
        runs.push(PolicyRun { policy, best_epoch: outcome.checkpoint.epoch, log: outcome.log, test });
    }
    let base = &runs[0].test;
    let deltas = runs
        .iter()
        .map(|r| PolicyDelta {
            policy: r.policy.name().to_owned(),
            micro_f1_minus_baseline: r.test.micro_f1 - base.micro_f1,
            macro_f1_minus_baseline: r.test.macro_f1 - base.macro_f1,
        })
        .collect();
    Ok(Comparison { baseline: runs[0].policy.name().to_owned(), runs, deltas })
}
