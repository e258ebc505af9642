//! Corpus ingestion, label vocabularies, splitting and the synthetic generator.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textprep::{self, ChunkPolicy, ChunkedDocument, TextError};

/// Probability that any given label is planted in a synthetic document.
pub const PLANT_PROBABILITY: f64 = 0.3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("no document carries any label code")]
    NoLabels,
    #[error("document {doc_id:?}: {source}")]
    Text {
        doc_id: String,
        #[source]
        source: TextError,
    },
}

/// One note and its gold codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    #[serde(rename = "id")]
    pub doc_id: String,
    pub text: String,
    pub codes: BTreeSet<String>,
}

pub fn ingest(path: &Path) -> Result<Vec<RawDocument>, CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_owned(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: RawDocument = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_owned(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateId(doc.doc_id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_jsonl(path: &Path, docs: &[RawDocument]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_owned(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for doc in docs {
        let line = serde_json::to_string(doc).expect("documents always serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// The `c` retained label codes, most frequent first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelVocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelVocabulary {
    fn from(labels: Vec<String>) -> Self {
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        LabelVocabulary { labels, index }
    }
}

impl From<LabelVocabulary> for Vec<String> {
    fn from(v: LabelVocabulary) -> Self {
        v.labels
    }
}

impl LabelVocabulary {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn position(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }
}

pub fn code_frequencies(docs: &[RawDocument]) -> BTreeMap<&str, usize> {
    let mut freq = BTreeMap::new();
    for doc in docs {
        for code in &doc.codes {
            *freq.entry(code.as_str()).or_insert(0) += 1;
        }
    }
    freq
}

pub fn build_label_vocab(docs: &[RawDocument], k: usize) -> Result<LabelVocabulary, CorpusError> {
    let freq = code_frequencies(docs);
    if freq.is_empty() {
        return Err(CorpusError::NoLabels);
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    // BTreeMap iteration is already lexicographic, so a stable sort keeps ties in code order.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    Ok(ranked.into_iter().take(k).map(|(code, _)| code.to_owned()).collect::<Vec<_>>().into())
}

/// Train / validation / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios(pub f64, pub f64, pub f64);

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios(0.8, 0.1, 0.1)
    }
}

impl SplitRatios {
    pub fn is_valid(&self) -> bool {
        let SplitRatios(a, b, c) = *self;
        [a, b, c].iter().all(|r| *r >= 0.0) && (a + b + c - 1.0).abs() <= 1e-9
    }

    /// Partition sizes for `n` items: floors for train and validation, remainder to test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // The small slack keeps products such as 100 * 0.57 from flooring one short.
        let floor = |r: f64| (((n as f64) * r + 1e-9).floor() as usize).min(n);
        let train = floor(self.0);
        let valid = floor(self.1).min(n - train);
        (train, valid, n - train - valid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle followed by a floor partition.
///
/// Panics if the ratios are negative or do not sum to one.
pub fn split<T>(items: Vec<T>, ratios: SplitRatios, seed: u64) -> Split<T> {
    assert!(ratios.is_valid(), "split ratios must be non-negative and sum to 1: {ratios:?}");
    let (n_train, n_valid, _) = ratios.sizes(items.len());
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> { idx.iter().map(|&i| slots[i].take().unwrap()).collect() };
    let train = take(&order[..n_train]);
    let validation = take(&order[n_train..n_train + n_valid]);
    let test = take(&order[n_train + n_valid..]);
    Split { train, validation, test }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Planting {
    Uniform,
    /// Markers only at token index `>= p`.
    BeyondPrefix(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_labels: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub planting: Planting,
    /// Size of the filler word pool.
    pub filler_vocab: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 100,
            n_labels: 10,
            min_len: 600,
            max_len: 1500,
            planting: Planting::Uniform,
            filler_vocab: 500,
            seed: 0,
        }
    }
}

pub fn synth_marker(label: usize) -> String {
    format!("kw{label}")
}

pub fn synth_code(label: usize) -> String {
    format!("L{label:03}")
}

/// Filler text with one marker token `kw{k}` per planted label.
///
/// A label whose allowed region has no free position (a document no longer
/// than the prefix, or already full of markers) is not planted, so `codes`
/// always equals the set of markers present.
pub fn synth_generate(cfg: &SynthConfig) -> Vec<RawDocument> {
    assert!(cfg.n_labels >= 1 && cfg.min_len >= 1 && cfg.min_len <= cfg.max_len);
    assert!(cfg.filler_vocab >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_docs)
        .map(|d| {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut tokens: Vec<String> =
                (0..len).map(|_| format!("f{}", rng.gen_range(0..cfg.filler_vocab))).collect();
            let start = match cfg.planting {
                Planting::Uniform => 0,
                Planting::BeyondPrefix(p) => p,
            };
            let mut used = BTreeSet::new();
            let mut codes = BTreeSet::new();
            for label in 0..cfg.n_labels {
                if !rng.gen_bool(PLANT_PROBABILITY) || start >= len {
                    continue;
                }
                let free: Vec<usize> = (start..len).filter(|p| !used.contains(p)).collect();
                if let Some(&pos) = free.choose(&mut rng) {
                    used.insert(pos);
                    tokens[pos] = synth_marker(label);
                    codes.insert(synth_code(label));
                }
            }
            RawDocument { doc_id: format!("syn{d:06}"), text: tokens.join(" "), codes }
        })
        .collect()
}

/// One line of the chunked-corpus file: a single valid chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub doc_id: String,
    pub chunk_index: usize,
    pub tokens: Vec<String>,
}

/// Writes every valid chunk of every document, in document then chunk order.
pub fn write_chunk_file<'a>(
    path: &Path,
    docs: impl IntoIterator<Item = &'a ChunkedDocument>,
) -> Result<usize, CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_owned(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut count = 0;
    for doc in docs {
        for (j, tokens) in doc.valid_chunks() {
            let rec = ChunkRecord { doc_id: doc.doc_id.clone(), chunk_index: j, tokens: tokens.to_vec() };
            writeln!(out, "{}", serde_json::to_string(&rec).expect("chunk records serialize")).map_err(io_err)?;
            count += 1;
        }
    }
    out.flush().map_err(io_err)?;
    Ok(count)
}

pub fn read_chunk_file(path: &Path) -> Result<Vec<ChunkRecord>, CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_owned(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_owned(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// A chunked document with its target vector over the label vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub doc_id: String,
    pub chunked: ChunkedDocument,
    pub targets: Vec<bool>,
}

pub fn targets_for(codes: &BTreeSet<String>, vocab: &LabelVocabulary) -> Vec<bool> {
    vocab.labels().iter().map(|l| codes.contains(l)).collect()
}

pub fn vectorize(
    doc: &RawDocument,
    vocab: &LabelVocabulary,
    policy: &ChunkPolicy,
    doc_token_limit: usize,
) -> Result<LabeledExample, CorpusError> {
    let text_err = |source| CorpusError::Text { doc_id: doc.doc_id.clone(), source };
    let tokens = textprep::truncate_head(&textprep::normalize(&doc.text), doc_token_limit);
    let chunked = textprep::chunk(&doc.doc_id, &tokens, policy).map_err(text_err)?;
    Ok(LabeledExample { doc_id: doc.doc_id.clone(), chunked, targets: targets_for(&doc.codes, vocab) })
}

/// Vectorizes a document set, optionally dropping documents with no in-vocabulary code.
pub fn vectorize_all(
    docs: &[RawDocument],
    vocab: &LabelVocabulary,
    policy: &ChunkPolicy,
    doc_token_limit: usize,
    keep_unlabeled: bool,
) -> Result<Vec<LabeledExample>, CorpusError> {
    let mut out = Vec::with_capacity(docs.len());
    for doc in docs {
        let ex = vectorize(doc, vocab, policy, doc_token_limit)?;
        if keep_unlabeled || ex.targets.iter().any(|&t| t) {
            out.push(ex);
        }
    }
    Ok(out)
}
