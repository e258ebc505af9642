//! Loss, optimization and the epoch loop.
//!
//! Training minimizes binary cross-entropy averaged over labels and over the
//! documents of a mini-batch. Per-document forward/backward passes run in
//! parallel, but their gradients are summed in document order so a run is
//! bitwise reproducible for a given seed regardless of thread count.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_SCHEMA_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabelVocabulary, LabeledExample};
use crate::encoder::{
    encode_document, encode_document_backward, EmbeddingStore, EncodedDocument, Encoder, EncoderError,
    EncoderGradients, EncoderParameters, ReferenceEncoder, TokenVocab,
};
use crate::metrics::{MetricsError, MetricsReport};
use crate::sac::{sac_backward, sac_forward, AttentionWeights, SacCache, SacError, SacParameters, ScoreVector};
use crate::textprep::ChunkPolicy;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-12;
pub const REFERENCE_LEARNING_RATE: f64 = 1e-2;
pub const STORE_LEARNING_RATE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("example {doc_id:?} has {got} targets, model has {expected} labels")]
    TargetWidth { doc_id: String, got: usize, expected: usize },
    #[error("checkpoint was trained in {checkpoint} mode but {given} was supplied")]
    ModeMismatch { checkpoint: &'static str, given: &'static str },
    #[error("document {doc_id:?}: {source}")]
    Encoder {
        doc_id: String,
        #[source]
        source: EncoderError,
    },
    #[error("document {doc_id:?}: {source}")]
    Sac {
        doc_id: String,
        #[source]
        source: SacError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error("checkpoint schema version {found:?}, expected {expected}")]
    SchemaVersionMismatch { found: Option<u64>, expected: u64 },
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: STORE_LEARNING_RATE,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0) {
            return Err(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.batch_size == 0 {
            return Err("batch size must be at least 1".into());
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over labels and its gradient with respect to the scores.
pub fn bce_loss(scores: &[f64], targets: &[bool]) -> (f64, Vec<f64>) {
    assert_eq!(scores.len(), targets.len());
    let c = scores.len() as f64;
    let mut loss = 0.0;
    let grad = scores
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y {
                loss -= p.ln();
                -1.0 / (p * c)
            } else {
                loss -= (1.0 - p).ln();
                1.0 / ((1.0 - p) * c)
            }
        })
        .collect();
    (loss / c, grad)
}

/// How chunk vectors are produced during training.
#[derive(Debug, Clone, Copy)]
pub enum EncoderMode<'a> {
    /// Train the reference encoder from scratch.
    Reference { h: usize, vocab_cap: usize },
    /// Frozen vectors from a precomputed store.
    Store(&'a EmbeddingStore),
}

/// Trainable state: optional reference encoder plus the classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub token_vocab: Option<TokenVocab>,
    pub encoder: Option<EncoderParameters>,
    pub sac: SacParameters,
}

/// Per-document forward results used by prediction.
#[derive(Debug, Clone)]
pub struct DocumentOutput {
    pub scores: ScoreVector,
    pub attention: AttentionWeights,
}

/// Dense gradients aligned with [`Model::tensors_mut`].
pub type Gradients = Vec<Vec<f64>>;

impl Model {
    pub fn init(mode: EncoderMode<'_>, train: &[LabeledExample], c: usize, rng: &mut ChaCha8Rng) -> Self {
        match mode {
            EncoderMode::Reference { h, vocab_cap } => {
                let vocab = TokenVocab::from_documents(train.iter().map(|e| &e.chunked), vocab_cap);
                let encoder = EncoderParameters::init(vocab.size(), h, rng);
                let sac = SacParameters::init(h, c, rng);
                Model { token_vocab: Some(vocab), encoder: Some(encoder), sac }
            }
            EncoderMode::Store(store) => {
                Model { token_vocab: None, encoder: None, sac: SacParameters::init(store.h(), c, rng) }
            }
        }
    }

    pub fn mode_name(&self) -> &'static str {
        if self.encoder.is_some() {
            "reference"
        } else {
            "store"
        }
    }

    pub fn encoder<'a>(&'a self, store: Option<&'a EmbeddingStore>) -> Result<Encoder<'a>, TrainError> {
        match (&self.encoder, &self.token_vocab, store) {
            (Some(params), Some(vocab), None) => Ok(Encoder::Reference(ReferenceEncoder { params, vocab })),
            (None, _, Some(store)) => Ok(Encoder::Store(store)),
            (Some(_), _, Some(_)) => Err(TrainError::ModeMismatch { checkpoint: "reference", given: "an embedding store" }),
            _ => Err(TrainError::ModeMismatch { checkpoint: "store", given: "no embedding store" }),
        }
    }

    /// Trainable tensors in a fixed order: embeddings, projection, projection bias, S, W, bias.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(e) = self.encoder.as_mut() {
            out.push(&mut e.token_embeddings);
            out.push(&mut e.projection);
            out.push(&mut e.proj_bias);
        }
        out.push(&mut self.sac.s);
        out.push(&mut self.sac.w);
        out.push(&mut self.sac.bias);
        out
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(e) = &self.encoder {
            out.extend([e.token_embeddings.len(), e.projection.len(), e.proj_bias.len()]);
        }
        out.extend([self.sac.s.len(), self.sac.w.len(), self.sac.bias.len()]);
        out
    }

    fn forward_cached(
        &self,
        encoder: &Encoder<'_>,
        ex: &LabeledExample,
    ) -> Result<(ScoreVector, SacCache, EncodedDocument), TrainError> {
        let encoded = encode_document(encoder, &ex.chunked)
            .map_err(|source| TrainError::Encoder { doc_id: ex.doc_id.clone(), source })?;
        let (scores, cache) = sac_forward(&encoded.matrix, &self.sac)
            .map_err(|source| TrainError::Sac { doc_id: ex.doc_id.clone(), source })?;
        Ok((scores, cache, encoded))
    }

    pub fn forward(&self, encoder: &Encoder<'_>, ex: &LabeledExample) -> Result<DocumentOutput, TrainError> {
        let (scores, cache, _) = self.forward_cached(encoder, ex)?;
        Ok(DocumentOutput { scores, attention: cache.alpha })
    }

    /// Loss and gradients for one document.
    pub fn loss_and_gradients(
        &self,
        encoder: &Encoder<'_>,
        ex: &LabeledExample,
    ) -> Result<(f64, DocumentGradients), TrainError> {
        if ex.targets.len() != self.sac.c {
            return Err(TrainError::TargetWidth { doc_id: ex.doc_id.clone(), got: ex.targets.len(), expected: self.sac.c });
        }
        let (scores, cache, encoded) = self.forward_cached(encoder, ex)?;
        let (loss, dscores) = bce_loss(&scores.scores, &ex.targets);
        let sac = sac_backward(&self.sac, &cache, &dscores);
        let encoder_grads = self.encoder.as_ref().map(|p| encode_document_backward(p, &encoded, &sac.d));
        Ok((loss, DocumentGradients { encoder: encoder_grads, s: sac.s, w: sac.w, bias: sac.bias }))
    }
}

/// Gradients of one document's loss; encoder embedding rows are sparse.
#[derive(Debug, Clone)]
pub struct DocumentGradients {
    pub encoder: Option<EncoderGradients>,
    pub s: Vec<f64>,
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DocumentGradients {
    /// Adds `scale × self` into dense buffers laid out like [`Model::tensors_mut`].
    pub fn add_to(&self, dense: &mut Gradients, scale: f64, h: usize) {
        let axpy = |dst: &mut [f64], src: &[f64]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        let mut k = 0;
        if let Some(e) = &self.encoder {
            for (&row, g) in &e.token_embeddings {
                axpy(&mut dense[0][row * h..(row + 1) * h], g);
            }
            axpy(&mut dense[1], &e.projection);
            axpy(&mut dense[2], &e.proj_bias);
            k = 3;
        }
        axpy(&mut dense[k], &self.s);
        axpy(&mut dense[k + 1], &self.w);
        axpy(&mut dense[k + 2], &self.bias);
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// What the checkpoint needs besides the learned weights.
#[derive(Debug, Clone)]
pub struct FitContext {
    pub label_vocab: LabelVocabulary,
    pub policy: ChunkPolicy,
    pub doc_token_limit: usize,
}

/// Mini-batch training with validation micro-F1 model selection and early stopping.
///
/// An empty validation set falls back to selecting on the training set.
pub fn fit(
    train: &[LabeledExample],
    validation: &[LabeledExample],
    mode: EncoderMode<'_>,
    config: &TrainConfig,
    ctx: &FitContext,
) -> Result<FitOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let c = ctx.label_vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(mode, train, c, &mut rng);
    let store = match mode {
        EncoderMode::Store(s) => Some(s),
        EncoderMode::Reference { .. } => None,
    };
    let selection = if validation.is_empty() { train } else { validation };
    let sizes = model.tensor_sizes();
    let mut adam = AdamState::new(&sizes);
    let adam_cfg = config.adam();
    let h = model.sac.h;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Model, usize)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(f64, DocumentGradients), TrainError>> = {
                let encoder = model.encoder(store)?;
                batch.par_iter().map(|&i| model.loss_and_gradients(&encoder, &train[i])).collect()
            };
            let mut dense: Gradients = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let scale = 1.0 / batch.len() as f64;
            for result in results {
                let (loss, grads) = result?;
                epoch_loss += loss;
                grads.add_to(&mut dense, scale, h);
            }
            adam_step(&mut model.tensors_mut(), &dense, &mut adam, &adam_cfg);
        }
        let report = evaluate_model(&model, selection, store, config.threshold, ctx.label_vocab.labels())?;
        log.push(EpochLog {
            epoch,
            loss: epoch_loss / train.len() as f64,
            val_precision: report.micro_precision,
            val_recall: report.micro_recall,
            val_f1: report.micro_f1,
        });
        if best.as_ref().is_none_or(|(f1, _, _)| report.micro_f1 > *f1) {
            best = Some((report.micro_f1, model.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_f1, best_model, best_epoch) = best.expect("at least one epoch runs when max_epochs >= 1");
    let checkpoint = Checkpoint::new(config, ctx, best_model, best_f1, best_epoch);
    Ok(FitOutcome { checkpoint, log })
}

pub fn predict_all(
    model: &Model,
    dataset: &[LabeledExample],
    store: Option<&EmbeddingStore>,
) -> Result<Vec<DocumentOutput>, TrainError> {
    let encoder = model.encoder(store)?;
    dataset.par_iter().map(|ex| model.forward(&encoder, ex)).collect()
}

pub fn evaluate_model(
    model: &Model,
    dataset: &[LabeledExample],
    store: Option<&EmbeddingStore>,
    threshold: f64,
    labels: &[String],
) -> Result<MetricsReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let outputs = predict_all(model, dataset, store)?;
    let predictions: Vec<Vec<bool>> =
        outputs.iter().map(|o| o.scores.scores.iter().map(|&p| p > threshold).collect()).collect();
    let targets: Vec<Vec<bool>> = dataset.iter().map(|e| e.targets.clone()).collect();
    Ok(MetricsReport::evaluate(&predictions, &targets, labels)?)
}

pub fn evaluate(
    checkpoint: &Checkpoint,
    dataset: &[LabeledExample],
    store: Option<&EmbeddingStore>,
) -> Result<MetricsReport, TrainError> {
    evaluate_model(&checkpoint.model, dataset, store, checkpoint.config.threshold, checkpoint.label_vocab.labels())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_perfect_and_half() {
        let (loss, _) = bce_loss(&[1.0], &[true]);
        assert!(loss.abs() < 1e-11);
        let (loss, grad) = bce_loss(&[0.5], &[false]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((grad[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let scores = [0.1, 0.9, 0.35, 0.5, 0.77, 0.02, 0.64, 0.999];
        let targets = [true, false, true, true, false, false, true, true];
        let (_, grad) = bce_loss(&scores, &targets);
        let step = 1e-7;
        for i in 0..scores.len() {
            let mut plus = scores;
            let mut minus = scores;
            plus[i] += step;
            minus[i] -= step;
            let numeric = (bce_loss(&plus, &targets).0 - bce_loss(&minus, &targets).0) / (2.0 * step);
            let rel = (numeric - grad[i]).abs() / grad[i].abs();
            assert!(rel <= 1e-6, "label {i}: analytic {} numeric {numeric}", grad[i]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
