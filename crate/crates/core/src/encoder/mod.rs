//! Chunk encoders and the document matrix.
//!
//! Each valid chunk becomes one `h`-dimensional vector and the vectors are
//! laid side by side as the columns of a [`DocumentMatrix`]. Two encoders are
//! available: a trainable reference encoder (`tanh(A · meanpool(E[tokens]) + b)`)
//! and a lookup into an [`EmbeddingStore`] of vectors computed elsewhere.

mod store;

pub use store::{EmbeddingStore, StoreError, STORE_MAGIC, STORE_VERSION};

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textprep::ChunkedDocument;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_VOCAB_CAP: usize = 20_000;
/// Id reserved for tokens outside the vocabulary.
pub const OOV_ID: usize = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncoderError {
    #[error("cannot encode an empty chunk")]
    EmptyChunk,
    #[error("no embedding stored for document {doc_id:?} chunk {chunk}")]
    MissingEmbedding { doc_id: String, chunk: usize },
    #[error("width mismatch: encoder produces {encoder}, expected {expected}")]
    WidthMismatch { encoder: usize, expected: usize },
}

/// Word-level vocabulary for the reference encoder; id 0 is the OOV slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for TokenVocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i + 1)).collect();
        TokenVocab { tokens, index }
    }
}

impl From<TokenVocab> for Vec<String> {
    fn from(v: TokenVocab) -> Self {
        v.tokens
    }
}

impl TokenVocab {
    /// Most frequent tokens first (ties lexicographic), at most `cap` of them.
    pub fn build<'a>(chunks: impl IntoIterator<Item = &'a [String]>, cap: usize) -> Self {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for chunk in chunks {
            for tok in chunk {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1));
        ranked.into_iter().take(cap).map(|(t, _)| t.to_owned()).collect::<Vec<_>>().into()
    }

    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a ChunkedDocument>, cap: usize) -> Self {
        Self::build(docs.into_iter().flat_map(|d| d.valid_chunks().map(|(_, c)| c)), cap)
    }

    /// Number of embedding rows needed, OOV included.
    pub fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Reference encoder weights: embeddings `E` (vocab × h), projection `A` (h × h), bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParameters {
    pub vocab_size: usize,
    pub h: usize,
    /// Row-major, row `t` is the embedding of token id `t`.
    pub token_embeddings: Vec<f64>,
    /// Row-major `A[r][c]`.
    pub projection: Vec<f64>,
    pub proj_bias: Vec<f64>,
}

/// Intermediates kept from a forward pass over one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkForward {
    pub ids: Vec<usize>,
    pub mean: Vec<f64>,
    pub output: Vec<f64>,
}

/// Gradients with the shapes of [`EncoderParameters`]; embedding rows are sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradients {
    pub token_embeddings: BTreeMap<usize, Vec<f64>>,
    pub projection: Vec<f64>,
    pub proj_bias: Vec<f64>,
}

impl EncoderGradients {
    pub fn zeros(h: usize) -> Self {
        EncoderGradients { token_embeddings: BTreeMap::new(), projection: vec![0.0; h * h], proj_bias: vec![0.0; h] }
    }

    pub fn accumulate(&mut self, other: &EncoderGradients) {
        for (&row, g) in &other.token_embeddings {
            let dst = self.token_embeddings.entry(row).or_insert_with(|| vec![0.0; g.len()]);
            add_into(dst, g);
        }
        add_into(&mut self.projection, &other.projection);
        add_into(&mut self.proj_bias, &other.proj_bias);
    }

    /// Dense copy of the embedding gradient, for checks against finite differences.
    pub fn dense_embeddings(&self, vocab_size: usize, h: usize) -> Vec<f64> {
        let mut dense = vec![0.0; vocab_size * h];
        for (&row, g) in &self.token_embeddings {
            dense[row * h..(row + 1) * h].copy_from_slice(g);
        }
        dense
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl EncoderParameters {
    pub fn zeros(vocab_size: usize, h: usize) -> Self {
        EncoderParameters {
            vocab_size,
            h,
            token_embeddings: vec![0.0; vocab_size * h],
            projection: vec![0.0; h * h],
            proj_bias: vec![0.0; h],
        }
    }

    /// Embeddings and projection uniform in `[-1/sqrt(h), 1/sqrt(h)]`, zero bias.
    pub fn init<R: Rng>(vocab_size: usize, h: usize, rng: &mut R) -> Self {
        assert!(h >= 1, "encoder width must be at least 1");
        let bound = 1.0 / (h as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..=bound)).collect() };
        let token_embeddings = draw(vocab_size * h);
        let projection = draw(h * h);
        EncoderParameters { vocab_size, h, token_embeddings, projection, proj_bias: vec![0.0; h] }
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        &self.token_embeddings[id * self.h..(id + 1) * self.h]
    }

    pub fn is_finite(&self) -> bool {
        self.token_embeddings.iter().chain(&self.projection).chain(&self.proj_bias).all(|v| v.is_finite())
    }

    pub fn forward(&self, ids: &[usize]) -> Result<ChunkForward, EncoderError> {
        if ids.is_empty() {
            return Err(EncoderError::EmptyChunk);
        }
        let h = self.h;
        let mut mean = vec![0.0; h];
        for &id in ids {
            add_into(&mut mean, self.embedding(id));
        }
        let scale = 1.0 / ids.len() as f64;
        mean.iter_mut().for_each(|m| *m *= scale);
        let output = (0..h)
            .map(|r| {
                let row = &self.projection[r * h..(r + 1) * h];
                let z: f64 = row.iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>() + self.proj_bias[r];
                z.tanh()
            })
            .collect();
        Ok(ChunkForward { ids: ids.to_vec(), mean, output })
    }

    /// Gradient of `upstream · output` with respect to every parameter.
    pub fn backward(&self, fwd: &ChunkForward, upstream: &[f64]) -> EncoderGradients {
        let h = self.h;
        let dz: Vec<f64> = fwd.output.iter().zip(upstream).map(|(y, g)| g * (1.0 - y * y)).collect();
        let mut projection = vec![0.0; h * h];
        for r in 0..h {
            for c in 0..h {
                projection[r * h + c] = dz[r] * fwd.mean[c];
            }
        }
        let mut dmean = vec![0.0; h];
        for r in 0..h {
            let row = &self.projection[r * h..(r + 1) * h];
            for c in 0..h {
                dmean[c] += row[c] * dz[r];
            }
        }
        let scale = 1.0 / fwd.ids.len() as f64;
        let mut token_embeddings: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &id in &fwd.ids {
            let row = token_embeddings.entry(id).or_insert_with(|| vec![0.0; h]);
            for (g, d) in row.iter_mut().zip(&dmean) {
                *g += d * scale;
            }
        }
        EncoderGradients { token_embeddings, projection, proj_bias: dz }
    }
}

/// A reference encoder together with the vocabulary that maps words to rows.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceEncoder<'a> {
    pub params: &'a EncoderParameters,
    pub vocab: &'a TokenVocab,
}

impl ReferenceEncoder<'_> {
    pub fn encode_chunk(&self, chunk: &[String]) -> Result<ChunkForward, EncoderError> {
        self.params.forward(&self.vocab.ids(chunk))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Encoder<'a> {
    Reference(ReferenceEncoder<'a>),
    Store(&'a EmbeddingStore),
}

impl Encoder<'_> {
    pub fn width(&self) -> usize {
        match self {
            Encoder::Reference(r) => r.params.h,
            Encoder::Store(s) => s.h(),
        }
    }
}

/// The `h × n` matrix whose column `j` encodes chunk `j`; masked columns are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentMatrix {
    pub h: usize,
    pub n: usize,
    /// Column-major storage.
    pub data: Vec<f64>,
    pub valid_mask: Vec<bool>,
}

impl DocumentMatrix {
    pub fn zeros(h: usize, valid_mask: Vec<bool>) -> Self {
        let n = valid_mask.len();
        DocumentMatrix { h, n, data: vec![0.0; h * n], valid_mask }
    }

    /// Builds a matrix from explicit columns; masked columns are zeroed.
    pub fn from_columns(columns: &[Vec<f64>], valid_mask: Vec<bool>) -> Self {
        assert_eq!(columns.len(), valid_mask.len());
        let h = columns.first().map_or(0, Vec::len);
        let mut m = DocumentMatrix::zeros(h, valid_mask);
        for (j, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), h);
            if m.valid_mask[j] {
                m.column_mut(j).copy_from_slice(col);
            }
        }
        m
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.h..(j + 1) * self.h]
    }

    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.h..(j + 1) * self.h]
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(|&j| self.valid_mask[j])
    }

    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

/// A document matrix plus the per-chunk caches needed for the encoder backward pass.
#[derive(Debug, Clone)]
pub struct EncodedDocument {
    pub matrix: DocumentMatrix,
    /// `Some` for valid chunks of a reference-encoded document.
    pub chunk_caches: Vec<Option<ChunkForward>>,
}

pub fn encode_document(encoder: &Encoder<'_>, doc: &ChunkedDocument) -> Result<EncodedDocument, EncoderError> {
    let h = encoder.width();
    let mut matrix = DocumentMatrix::zeros(h, doc.valid_mask.clone());
    let mut chunk_caches = vec![None; doc.max_chunks()];
    for (j, chunk) in doc.valid_chunks() {
        match encoder {
            Encoder::Reference(r) => {
                let fwd = r.encode_chunk(chunk)?;
                matrix.column_mut(j).copy_from_slice(&fwd.output);
                chunk_caches[j] = Some(fwd);
            }
            Encoder::Store(store) => {
                let v = store.get(&doc.doc_id, j).ok_or_else(|| EncoderError::MissingEmbedding {
                    doc_id: doc.doc_id.clone(),
                    chunk: j,
                })?;
                for (dst, &src) in matrix.column_mut(j).iter_mut().zip(v) {
                    *dst = f64::from(src);
                }
            }
        }
    }
    Ok(EncodedDocument { matrix, chunk_caches })
}

/// Backpropagates a document-matrix gradient through every cached chunk.
pub fn encode_document_backward(
    params: &EncoderParameters,
    encoded: &EncodedDocument,
    d_matrix: &DocumentMatrix,
) -> EncoderGradients {
    let mut grads = EncoderGradients::zeros(params.h);
    for (j, cache) in encoded.chunk_caches.iter().enumerate() {
        if let Some(fwd) = cache {
            grads.accumulate(&params.backward(fwd, d_matrix.column(j)));
        }
    }
    grads
}
