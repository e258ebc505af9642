//! Text normalization and chunking.
//!
//! Documents are lowercased, every character outside `a-z0-9` becomes a
//! separator, and tokens with no letter are dropped (`200` goes, `200cc`
//! stays). The resulting word stream is then cut into chunks according to a
//! [`ChunkPolicy`]: consecutive fixed-width chunks for the document-to-sequence
//! encoding, or a single truncated window for the head / tail / head+tail
//! baselines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Front-of-document token limit applied before chunking.
pub const DEFAULT_DOC_TOKEN_LIMIT: usize = 2500;
pub const DEFAULT_WORDS_PER_CHUNK: usize = 100;
pub const DEFAULT_MAX_CHUNKS: usize = 25;
pub const DEFAULT_HEAD_LEN: usize = 510;
pub const DEFAULT_TAIL_LEN: usize = 510;
pub const DEFAULT_HEAD_TAIL: (usize, usize) = (128, 382);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("document has no tokens after normalization")]
    EmptyDocument,
    #[error("invalid chunk policy: {0}")]
    InvalidPolicy(String),
}

/// Normalized word tokens: lowercase, alphanumeric, each with at least one letter.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<String>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn join(&self) -> String {
        self.0.join(" ")
    }
}

impl From<Vec<String>> for TokenSequence {
    fn from(tokens: Vec<String>) -> Self {
        TokenSequence(tokens)
    }
}

pub fn normalize(text: &str) -> TokenSequence {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|ch| if ch.is_ascii_lowercase() || ch.is_ascii_digit() { ch } else { ' ' })
        .collect();
    TokenSequence(
        cleaned
            .split_whitespace()
            .filter(|tok| tok.bytes().any(|b| b.is_ascii_lowercase()))
            .map(str::to_owned)
            .collect(),
    )
}

pub fn truncate_head(tokens: &TokenSequence, limit: usize) -> TokenSequence {
    TokenSequence(tokens.0.iter().take(limit).cloned().collect())
}

/// How a token stream is cut into encoder inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChunkPolicy {
    /// Consecutive chunks of `words_per_chunk` tokens, at most `max_chunks` of them.
    D2s { words_per_chunk: usize, max_chunks: usize },
    /// First `head_len` tokens as one chunk.
    Head { head_len: usize },
    /// Last `tail_len` tokens as one chunk.
    Tail { tail_len: usize },
    /// First `head_len` tokens followed by the last `tail_len` tokens, one chunk.
    HeadTail { head_len: usize, tail_len: usize },
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        ChunkPolicy::D2s {
            words_per_chunk: DEFAULT_WORDS_PER_CHUNK,
            max_chunks: DEFAULT_MAX_CHUNKS,
        }
    }
}

impl ChunkPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            ChunkPolicy::D2s { .. } => "d2s",
            ChunkPolicy::Head { .. } => "head",
            ChunkPolicy::Tail { .. } => "tail",
            ChunkPolicy::HeadTail { .. } => "head_tail",
        }
    }

    /// Token slots per chunk.
    pub fn words_per_chunk(&self) -> usize {
        match *self {
            ChunkPolicy::D2s { words_per_chunk, .. } => words_per_chunk,
            ChunkPolicy::Head { head_len } => head_len,
            ChunkPolicy::Tail { tail_len } => tail_len,
            ChunkPolicy::HeadTail { head_len, tail_len } => head_len + tail_len,
        }
    }

    /// Chunk slots per document. The truncation baselines always use one.
    pub fn max_chunks(&self) -> usize {
        match *self {
            ChunkPolicy::D2s { max_chunks, .. } => max_chunks,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<(), TextError> {
        let bad = |msg: &str| Err(TextError::InvalidPolicy(format!("{}: {msg}", self.name())));
        match *self {
            ChunkPolicy::D2s { words_per_chunk, max_chunks } => {
                if words_per_chunk == 0 || max_chunks == 0 {
                    return bad("words_per_chunk and max_chunks must be at least 1");
                }
            }
            ChunkPolicy::Head { head_len } if head_len == 0 => return bad("head_len must be at least 1"),
            ChunkPolicy::Tail { tail_len } if tail_len == 0 => return bad("tail_len must be at least 1"),
            ChunkPolicy::HeadTail { head_len, tail_len } if head_len == 0 || tail_len == 0 => {
                return bad("head_len and tail_len must be at least 1")
            }
            _ => {}
        }
        Ok(())
    }
}

/// A document cut into `max_chunks` slots; only a prefix of them carries tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkedDocument {
    pub doc_id: String,
    pub words_per_chunk: usize,
    /// One entry per slot; masked slots are empty.
    pub chunks: Vec<Vec<String>>,
    pub valid_mask: Vec<bool>,
    pub n_valid: usize,
}

impl ChunkedDocument {
    pub fn max_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn valid_chunks(&self) -> impl Iterator<Item = (usize, &[String])> {
        self.chunks
            .iter()
            .enumerate()
            .filter(|(j, _)| self.valid_mask[*j])
            .map(|(j, c)| (j, c.as_slice()))
    }

    /// Checks the structural invariants; used by tests and the chunk-file reader.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.chunks.len() != self.valid_mask.len() {
            return Err("mask length differs from chunk count".into());
        }
        let n_valid = self.valid_mask.iter().filter(|&&v| v).count();
        if n_valid != self.n_valid || n_valid == 0 {
            return Err(format!("bad n_valid {} (mask has {n_valid})", self.n_valid));
        }
        if self.valid_mask.iter().skip(n_valid).any(|&v| v) {
            return Err("valid chunks are not a contiguous prefix".into());
        }
        for (j, chunk) in self.chunks.iter().enumerate() {
            if chunk.is_empty() == self.valid_mask[j] {
                return Err(format!("chunk {j} emptiness disagrees with mask"));
            }
            if chunk.len() > self.words_per_chunk {
                return Err(format!("chunk {j} exceeds {} tokens", self.words_per_chunk));
            }
        }
        Ok(())
    }
}

pub fn chunk(doc_id: &str, tokens: &TokenSequence, policy: &ChunkPolicy) -> Result<ChunkedDocument, TextError> {
    policy.validate()?;
    if tokens.is_empty() {
        return Err(TextError::EmptyDocument);
    }
    let toks = tokens.tokens();
    let slots = policy.max_chunks();
    let mut chunks: Vec<Vec<String>> = match *policy {
        ChunkPolicy::D2s { words_per_chunk, max_chunks } => toks
            .iter()
            .take(words_per_chunk * max_chunks)
            .cloned()
            .collect::<Vec<_>>()
            .chunks(words_per_chunk)
            .map(<[String]>::to_vec)
            .collect(),
        ChunkPolicy::Head { head_len } => vec![toks[..head_len.min(toks.len())].to_vec()],
        ChunkPolicy::Tail { tail_len } => vec![toks[toks.len().saturating_sub(tail_len)..].to_vec()],
        ChunkPolicy::HeadTail { head_len, tail_len } => {
            if toks.len() <= head_len + tail_len {
                vec![toks.to_vec()]
            } else {
                let mut window = toks[..head_len].to_vec();
                window.extend_from_slice(&toks[toks.len() - tail_len..]);
                vec![window]
            }
        }
    };
    let n_valid = chunks.len();
    chunks.resize(slots, Vec::new());
    let valid_mask = (0..slots).map(|j| j < n_valid).collect();
    Ok(ChunkedDocument {
        doc_id: doc_id.to_owned(),
        words_per_chunk: policy.words_per_chunk(),
        chunks,
        valid_mask,
        n_valid,
    })
}
