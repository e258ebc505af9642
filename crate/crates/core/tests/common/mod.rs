//! Shared builders and independent oracles for the integration tests.
#![allow(dead_code)]

use d2s_core::corpus::{LabelVocabulary, LabeledExample, RawDocument};
use d2s_core::encoder::{DocumentMatrix, EncoderParameters, TokenVocab};
use d2s_core::sac::{label_vectors, sac_backward, sac_forward, SacParameters};
use d2s_core::textprep::ChunkedDocument;
use d2s_core::trainer::Model;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn uniform_vec<R: Rng>(rng: &mut R, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
}

pub fn random_sac<R: Rng>(rng: &mut R, h: usize, c: usize) -> SacParameters {
    SacParameters { h, c, s: uniform_vec(rng, h * c, 1.0), w: uniform_vec(rng, c * h, 1.0), bias: uniform_vec(rng, c, 0.5) }
}

/// Contiguous valid prefix of `n_valid` columns out of `n`; masked columns are zero.
pub fn random_matrix<R: Rng>(rng: &mut R, h: usize, n: usize, n_valid: usize) -> DocumentMatrix {
    let mask: Vec<bool> = (0..n).map(|j| j < n_valid).collect();
    let cols: Vec<Vec<f64>> = (0..n).map(|_| uniform_vec(rng, h, 1.0)).collect();
    DocumentMatrix::from_columns(&cols, mask)
}

/// A chunked document over tokens `t0..t11`, each valid chunk holding 1 to 5 tokens.
pub fn random_chunked<R: Rng>(rng: &mut R, n: usize, n_valid: usize) -> ChunkedDocument {
    let chunks: Vec<Vec<String>> = (0..n)
        .map(|j| {
            if j < n_valid {
                (0..rng.gen_range(1..=5)).map(|_| format!("t{}", rng.gen_range(0..12))).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    ChunkedDocument {
        doc_id: "doc".into(),
        words_per_chunk: 5,
        valid_mask: (0..n).map(|j| j < n_valid).collect(),
        chunks,
        n_valid,
    }
}

/// A reference-encoder model with all parameters drawn from `[-1, 1]` and one
/// training example. The vocabulary cap of 6 leaves some tokens out of vocabulary.
pub fn random_instance<R: Rng>(rng: &mut R, h: usize, n: usize, n_valid: usize, c: usize) -> (Model, LabeledExample) {
    let chunked = random_chunked(rng, n, n_valid);
    let vocab = TokenVocab::from_documents([&chunked], 6);
    let v = vocab.size();
    let encoder = EncoderParameters {
        vocab_size: v,
        h,
        token_embeddings: uniform_vec(rng, v * h, 1.0),
        projection: uniform_vec(rng, h * h, 1.0),
        proj_bias: uniform_vec(rng, h, 0.5),
    };
    let model = Model { token_vocab: Some(vocab), encoder: Some(encoder), sac: random_sac(rng, h, c) };
    let targets = (0..c).map(|_| rng.gen_bool(0.5)).collect();
    (model, LabeledExample { doc_id: "doc".into(), chunked, targets })
}

pub fn model_loss(model: &Model, ex: &LabeledExample) -> f64 {
    let encoder = model.encoder(None).expect("reference model");
    model.loss_and_gradients(&encoder, ex).expect("forward succeeds").0
}

/// Largest relative error between the analytic end-to-end gradient and central
/// differences over every trainable scalar.
pub fn end_to_end_fd_error(model: &Model, ex: &LabeledExample) -> f64 {
    let encoder = model.encoder(None).expect("reference model");
    let (_, grads) = model.loss_and_gradients(&encoder, ex).expect("forward succeeds");
    let mut dense: Vec<Vec<f64>> = model.tensor_sizes().iter().map(|&n| vec![0.0; n]).collect();
    grads.add_to(&mut dense, 1.0, model.sac.h);

    let mut worst: f64 = 0.0;
    for (t, analytic) in dense.iter().enumerate() {
        for (k, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            plus.tensors_mut()[t][k] += FD_STEP;
            let mut minus = model.clone();
            minus.tensors_mut()[t][k] -= FD_STEP;
            let numeric = (model_loss(&plus, ex) - model_loss(&minus, ex)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// Central-difference check of the classifier alone under the loss `Σ r_i · score_i`,
/// covering S, W, bias and the valid columns of D.
pub fn sac_fd_error(d: &DocumentMatrix, params: &SacParameters, r: &[f64]) -> f64 {
    let loss = |d: &DocumentMatrix, p: &SacParameters| -> f64 {
        let (scores, _) = sac_forward(d, p).expect("valid instance");
        scores.scores.iter().zip(r).map(|(s, r)| s * r).sum()
    };
    let (_, cache) = sac_forward(d, params).expect("valid instance");
    let g = sac_backward(params, &cache, r);
    let mut worst: f64 = 0.0;
    let mut check = |a: f64, plus: f64, minus: f64| {
        worst = worst.max(rel_err(a, (plus - minus) / (2.0 * FD_STEP)));
    };
    for k in 0..params.s.len() {
        let (mut p, mut m) = (params.clone(), params.clone());
        p.s[k] += FD_STEP;
        m.s[k] -= FD_STEP;
        check(g.s[k], loss(d, &p), loss(d, &m));
    }
    for k in 0..params.w.len() {
        let (mut p, mut m) = (params.clone(), params.clone());
        p.w[k] += FD_STEP;
        m.w[k] -= FD_STEP;
        check(g.w[k], loss(d, &p), loss(d, &m));
    }
    for k in 0..params.bias.len() {
        let (mut p, mut m) = (params.clone(), params.clone());
        p.bias[k] += FD_STEP;
        m.bias[k] -= FD_STEP;
        check(g.bias[k], loss(d, &p), loss(d, &m));
    }
    for j in d.valid_indices().collect::<Vec<_>>() {
        for k in 0..d.h {
            let (mut p, mut m) = (d.clone(), d.clone());
            p.column_mut(j)[k] += FD_STEP;
            m.column_mut(j)[k] -= FD_STEP;
            check(g.d.column(j)[k], loss(&p, params), loss(&m, params));
        }
    }
    worst
}

/// Deviations of one classifier instance from its structural invariants.
#[derive(Debug, Default, Clone, Copy)]
pub struct InvariantDeviations {
    /// Largest |row sum - 1| over labels.
    pub row_sum: f64,
    /// Largest attention weight on a masked chunk, or a negative weight's magnitude.
    pub masked_or_negative: f64,
    /// Largest gradient magnitude reaching a masked column.
    pub masked_gradient: f64,
    /// Largest distance of a label-vector coordinate outside the valid-column range.
    pub hull: f64,
    /// Largest score change under a joint permutation of the valid columns.
    pub permutation: f64,
    /// Whether raising every bias raised every score.
    pub bias_monotone: bool,
}

pub fn sac_invariants<R: Rng>(rng: &mut R, d: &DocumentMatrix, params: &SacParameters) -> InvariantDeviations {
    let mut out = InvariantDeviations { bias_monotone: true, ..Default::default() };
    let (scores, cache) = sac_forward(d, params).expect("valid instance");
    let alpha = &cache.alpha;
    for i in 0..params.c {
        let row = alpha.row(i);
        out.row_sum = out.row_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        for (j, &a) in row.iter().enumerate() {
            if !d.valid_mask[j] {
                out.masked_or_negative = out.masked_or_negative.max(a.abs());
            } else if a < 0.0 {
                out.masked_or_negative = out.masked_or_negative.max(-a);
            }
        }
    }

    let upstream: Vec<f64> = uniform_vec(rng, params.c, 1.0);
    let g = sac_backward(params, &cache, &upstream);
    for j in (0..d.n).filter(|&j| !d.valid_mask[j]) {
        for &v in g.d.column(j) {
            out.masked_gradient = out.masked_gradient.max(v.abs());
        }
    }

    let l = label_vectors(alpha, d);
    for i in 0..params.c {
        for k in 0..d.h {
            let coords: Vec<f64> = d.valid_indices().map(|j| d.column(j)[k]).collect();
            let lo = coords.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let x = l.row(i)[k];
            out.hull = out.hull.max(lo - x).max(x - hi);
        }
    }

    let valid: Vec<usize> = d.valid_indices().collect();
    let mut perm = valid.clone();
    for k in (1..perm.len()).rev() {
        perm.swap(k, rng.gen_range(0..=k));
    }
    let mut permuted = d.clone();
    for (&dst, &src) in valid.iter().zip(&perm) {
        permuted.column_mut(dst).copy_from_slice(d.column(src));
    }
    let (pscores, _) = sac_forward(&permuted, params).expect("valid instance");
    for (a, b) in scores.scores.iter().zip(&pscores.scores) {
        out.permutation = out.permutation.max((a - b).abs());
    }

    let mut raised = params.clone();
    raised.bias.iter_mut().for_each(|b| *b += 0.25);
    let (rscores, _) = sac_forward(d, &raised).expect("valid instance");
    out.bias_monotone = scores.scores.iter().zip(&rscores.scores).all(|(a, b)| b > a);
    out
}

/// Metrics recomputed from scratch by counting cells one at a time.
#[derive(Debug, Clone, Copy)]
pub struct BruteMetrics {
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub macro_f1_by_class: f64,
    pub micro_p: f64,
    pub micro_r: f64,
    pub micro_f1: f64,
}

fn div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn f1(p: f64, r: f64) -> f64 {
    div(2.0 * p * r, p + r)
}

pub fn brute_metrics(pred: &[Vec<bool>], targ: &[Vec<bool>]) -> BruteMetrics {
    let c = targ[0].len();
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    let (mut tp_all, mut fp_all, mut fn_all) = (0.0, 0.0, 0.0);
    for label in 0..c {
        let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
        for d in 0..targ.len() {
            match (pred[d][label], targ[d][label]) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fnn += 1.0,
                (false, false) => {}
            }
        }
        let p = div(tp, tp + fp);
        let r = div(tp, tp + fnn);
        sp += p;
        sr += r;
        sf += f1(p, r);
        tp_all += tp;
        fp_all += fp;
        fn_all += fnn;
    }
    let cf = c as f64;
    let (macro_p, macro_r) = (sp / cf, sr / cf);
    let micro_p = div(tp_all, tp_all + fp_all);
    let micro_r = div(tp_all, tp_all + fn_all);
    BruteMetrics {
        macro_p,
        macro_r,
        macro_f1: f1(macro_p, macro_r),
        macro_f1_by_class: sf / cf,
        micro_p,
        micro_r,
        micro_f1: f1(micro_p, micro_r),
    }
}

pub fn bool_matrix<R: Rng>(rng: &mut R, n: usize, c: usize, density: f64) -> Vec<Vec<bool>> {
    (0..n).map(|_| (0..c).map(|_| rng.gen_bool(density)).collect()).collect()
}

pub fn labels(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("L{i}")).collect()
}

/// Tiny two-label corpus: label A is signalled by token `alpha`, label B by `beta`.
pub fn toy_documents(n: usize) -> Vec<RawDocument> {
    (0..n)
        .map(|d| {
            let (a, b) = (d % 2 == 0, d % 3 == 0);
            let mut words: Vec<String> = (0..30).map(|k| format!("w{}", (d * 7 + k) % 40)).collect();
            let mut codes = std::collections::BTreeSet::new();
            if a {
                words.insert(d % 25, "alpha".into());
                codes.insert("A".to_string());
            }
            if b {
                words.insert(d % 17, "beta".into());
                codes.insert("B".to_string());
            }
            RawDocument { doc_id: format!("toy{d:03}"), text: words.join(" "), codes }
        })
        .collect()
}

pub fn vocab_of(docs: &[RawDocument]) -> LabelVocabulary {
    d2s_core::corpus::build_label_vocab(docs, 50).expect("labelled corpus")
}
