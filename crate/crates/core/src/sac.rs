//! Sequence attention classifier.
//!
//! For a document matrix `D` (h × n) and `c` labels:
//!
//! ```text
//! alpha = softmax_j(tanh(Dᵀ S))        per label, over valid chunks only
//! l_i   = Σ_j alpha_ij D_j
//! p_i   = σ(w_i · l_i + b_i)
//! pred  = p_i > 0.5
//! ```
//!
//! Masked chunks are outside the softmax support, so they get exactly zero
//! weight and zero gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::DocumentMatrix;

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SacError {
    #[error("document has no valid chunks")]
    NoValidChunks,
    #[error("document width {doc} does not match classifier width {params}")]
    WidthMismatch { doc: usize, params: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacParameters {
    pub h: usize,
    pub c: usize,
    /// Attention matrix `S`, h × c, row-major.
    pub s: Vec<f64>,
    /// Per-label weights, c × h, row-major (row `i` scores label `i`).
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SacParameters {
    pub fn zeros(h: usize, c: usize) -> Self {
        SacParameters { h, c, s: vec![0.0; h * c], w: vec![0.0; c * h], bias: vec![0.0; c] }
    }

    /// `S` and `W` uniform in `[-1/sqrt(h), 1/sqrt(h)]`, zero bias.
    pub fn init<R: Rng>(h: usize, c: usize, rng: &mut R) -> Self {
        assert!(h >= 1 && c >= 1, "classifier needs h >= 1 and c >= 1");
        let bound = 1.0 / (h as f64).sqrt();
        let s = (0..h * c).map(|_| rng.gen_range(-bound..=bound)).collect();
        let w = (0..c * h).map(|_| rng.gen_range(-bound..=bound)).collect();
        SacParameters { h, c, s, w, bias: vec![0.0; c] }
    }

    pub fn weights(&self, label: usize) -> &[f64] {
        &self.w[label * self.h..(label + 1) * self.h]
    }

    pub fn is_finite(&self) -> bool {
        self.s.iter().chain(&self.w).chain(&self.bias).all(|v| v.is_finite())
    }
}

/// `c × n` attention weights, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub c: usize,
    pub n: usize,
    pub alpha: Vec<f64>,
    pub valid_mask: Vec<bool>,
}

impl AttentionWeights {
    pub fn row(&self, label: usize) -> &[f64] {
        &self.alpha[label * self.n..(label + 1) * self.n]
    }
}

/// `c × h` label representations, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVectors {
    pub c: usize,
    pub h: usize,
    pub l: Vec<f64>,
}

impl LabelVectors {
    pub fn row(&self, label: usize) -> &[f64] {
        &self.l[label * self.h..(label + 1) * self.h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub predictions: Vec<bool>,
}

impl ScoreVector {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let predictions = scores.iter().map(|&p| p > DECISION_THRESHOLD).collect();
        ScoreVector { scores, predictions }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pre-softmax attention logits `tanh(Dᵀ S)`, stored n × c row-major.
fn attention_logits(d: &DocumentMatrix, params: &SacParameters) -> Vec<f64> {
    let (h, c) = (params.h, params.c);
    let mut logits = vec![0.0; d.n * c];
    for j in d.valid_indices() {
        let col = d.column(j);
        let out = &mut logits[j * c..(j + 1) * c];
        for (k, &dk) in col.iter().enumerate().take(h) {
            let srow = &params.s[k * c..(k + 1) * c];
            for (o, s) in out.iter_mut().zip(srow) {
                *o += dk * s;
            }
        }
        out.iter_mut().for_each(|v| *v = v.tanh());
    }
    logits
}

fn check_shapes(d: &DocumentMatrix, params: &SacParameters) -> Result<(), SacError> {
    if d.h != params.h {
        return Err(SacError::WidthMismatch { doc: d.h, params: params.h });
    }
    if d.n_valid() == 0 {
        return Err(SacError::NoValidChunks);
    }
    Ok(())
}

fn masked_softmax(d: &DocumentMatrix, logits: &[f64], c: usize) -> AttentionWeights {
    let n = d.n;
    let mut alpha = vec![0.0; c * n];
    for i in 0..c {
        let max = d.valid_indices().map(|j| logits[j * c + i]).fold(f64::NEG_INFINITY, f64::max);
        let row = &mut alpha[i * n..(i + 1) * n];
        let mut total = 0.0;
        for j in d.valid_indices() {
            let e = (logits[j * c + i] - max).exp();
            row[j] = e;
            total += e;
        }
        row.iter_mut().for_each(|a| *a /= total);
    }
    AttentionWeights { c, n, alpha, valid_mask: d.valid_mask.clone() }
}

pub fn attention(d: &DocumentMatrix, params: &SacParameters) -> Result<AttentionWeights, SacError> {
    check_shapes(d, params)?;
    Ok(masked_softmax(d, &attention_logits(d, params), params.c))
}

pub fn label_vectors(alpha: &AttentionWeights, d: &DocumentMatrix) -> LabelVectors {
    let (c, h) = (alpha.c, d.h);
    let mut l = vec![0.0; c * h];
    for i in 0..c {
        let weights = alpha.row(i);
        let out = &mut l[i * h..(i + 1) * h];
        for j in d.valid_indices() {
            for (o, x) in out.iter_mut().zip(d.column(j)) {
                *o += weights[j] * x;
            }
        }
    }
    LabelVectors { c, h, l }
}

fn label_logits(l: &LabelVectors, params: &SacParameters) -> Vec<f64> {
    (0..params.c)
        .map(|i| l.row(i).iter().zip(params.weights(i)).map(|(x, w)| x * w).sum::<f64>() + params.bias[i])
        .collect()
}

pub fn score(l: &LabelVectors, params: &SacParameters) -> ScoreVector {
    ScoreVector::from_scores(label_logits(l, params).into_iter().map(sigmoid).collect())
}

/// Forward intermediates retained for [`sac_backward`].
#[derive(Debug, Clone)]
pub struct SacCache {
    pub d: DocumentMatrix,
    /// `tanh(Dᵀ S)`, n × c row-major.
    pub logits: Vec<f64>,
    pub alpha: AttentionWeights,
    pub label_vectors: LabelVectors,
    pub scores: ScoreVector,
}

pub fn sac_forward(d: &DocumentMatrix, params: &SacParameters) -> Result<(ScoreVector, SacCache), SacError> {
    check_shapes(d, params)?;
    let logits = attention_logits(d, params);
    let alpha = masked_softmax(d, &logits, params.c);
    let lv = label_vectors(&alpha, d);
    let scores = score(&lv, params);
    let cache = SacCache { d: d.clone(), logits, alpha, label_vectors: lv, scores: scores.clone() };
    Ok((scores, cache))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacGradients {
    pub s: Vec<f64>,
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
    pub d: DocumentMatrix,
}

pub fn sac_backward(params: &SacParameters, cache: &SacCache, dloss_dscores: &[f64]) -> SacGradients {
    let (h, c) = (params.h, params.c);
    let d = &cache.d;
    let n = d.n;
    let mut grads = SacGradients {
        s: vec![0.0; h * c],
        w: vec![0.0; c * h],
        bias: vec![0.0; c],
        d: DocumentMatrix::zeros(h, d.valid_mask.clone()),
    };

    // sigmoid and per-label linear layer
    let mut d_label = vec![0.0; c * h];
    for i in 0..c {
        let p = cache.scores.scores[i];
        let du = dloss_dscores[i] * p * (1.0 - p);
        grads.bias[i] = du;
        let li = cache.label_vectors.row(i);
        let wi = params.weights(i);
        for k in 0..h {
            grads.w[i * h + k] = du * li[k];
            d_label[i * h + k] = du * wi[k];
        }
    }

    // l_i = Σ_j alpha_ij D_j, then softmax and tanh
    let mut d_pre = vec![0.0; n * c];
    for i in 0..c {
        let alpha = cache.alpha.row(i);
        let dli = &d_label[i * h..(i + 1) * h];
        let mut d_alpha = vec![0.0; n];
        for j in d.valid_indices() {
            let col = d.column(j);
            d_alpha[j] = dli.iter().zip(col).map(|(g, x)| g * x).sum();
            for (g, dl) in grads.d.column_mut(j).iter_mut().zip(dli) {
                *g += alpha[j] * dl;
            }
        }
        let weighted: f64 = d.valid_indices().map(|j| alpha[j] * d_alpha[j]).sum();
        for j in d.valid_indices() {
            let t = cache.logits[j * c + i];
            d_pre[j * c + i] = alpha[j] * (d_alpha[j] - weighted) * (1.0 - t * t);
        }
    }

    // pre = Dᵀ S
    for j in d.valid_indices() {
        let col = d.column(j);
        let dp = &d_pre[j * c..(j + 1) * c];
        for k in 0..h {
            let srow = &params.s[k * c..(k + 1) * c];
            let gsrow = &mut grads.s[k * c..(k + 1) * c];
            let mut dd = 0.0;
            for i in 0..c {
                gsrow[i] += col[k] * dp[i];
                dd += srow[i] * dp[i];
            }
            grads.d.column_mut(j)[k] += dd;
        }
    }
    grads
}
