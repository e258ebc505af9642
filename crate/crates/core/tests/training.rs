mod common;

use common::*;
use d2s_core::corpus::{self, LabeledExample};
use d2s_core::encoder::EmbeddingStore;
use d2s_core::sac::SacParameters;
use d2s_core::textprep::{ChunkPolicy, DEFAULT_DOC_TOKEN_LIMIT};
use d2s_core::trainer::{
    self, bce_loss, evaluate, evaluate_model, fit, load_checkpoint, save_checkpoint, Checkpoint, EncoderMode, FitContext,
    FitOutcome, Model, TrainConfig, TrainError,
};
use proptest::prelude::*;

const TOY_POLICY: ChunkPolicy = ChunkPolicy::D2s { words_per_chunk: 10, max_chunks: 4 };

fn toy_setup(n: usize) -> (Vec<LabeledExample>, FitContext) {
    let docs = toy_documents(n);
    let vocab = vocab_of(&docs);
    let data = corpus::vectorize_all(&docs, &vocab, &TOY_POLICY, DEFAULT_DOC_TOKEN_LIMIT, true).unwrap();
    (data, FitContext { label_vocab: vocab, policy: TOY_POLICY, doc_token_limit: DEFAULT_DOC_TOKEN_LIMIT })
}

fn toy_config(epochs: usize) -> TrainConfig {
    TrainConfig { learning_rate: 1e-2, batch_size: 8, max_epochs: epochs, patience: epochs, seed: 3, ..TrainConfig::default() }
}

fn reference() -> EncoderMode<'static> {
    EncoderMode::Reference { h: 16, vocab_cap: 100 }
}

fn toy_fit(epochs: usize) -> (Vec<LabeledExample>, FitOutcome) {
    let (data, ctx) = toy_setup(40);
    let out = fit(&data[..30], &data[30..], reference(), &toy_config(epochs), &ctx).unwrap();
    (data, out)
}

#[test]
fn training_loss_decreases_over_first_epochs() {
    let (_, out) = toy_fit(3);
    let losses: Vec<f64> = out.log.iter().map(|e| e.loss).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn fixed_seed_gives_identical_trajectory_and_checkpoint() {
    let (_, a) = toy_fit(3);
    let (_, b) = toy_fit(3);
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.to_json(), b.checkpoint.to_json());
}

#[test]
fn trajectory_does_not_depend_on_thread_count() {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| toy_fit(3).1.checkpoint.to_json())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn different_seeds_give_different_models() {
    let (data, ctx) = toy_setup(40);
    let a = fit(&data, &[], reference(), &toy_config(1), &ctx).unwrap();
    let b = fit(&data, &[], reference(), &TrainConfig { seed: 4, ..toy_config(1) }, &ctx).unwrap();
    assert_ne!(a.checkpoint.model, b.checkpoint.model);
}

#[test]
fn early_stopping_with_patience_one() {
    let (data, ctx) = toy_setup(40);
    // A vanishing learning rate leaves validation F1 flat after the first epoch.
    let cfg = TrainConfig { learning_rate: 1e-300, patience: 1, max_epochs: 10, ..toy_config(10) };
    let out = fit(&data[..30], &data[30..], reference(), &cfg, &ctx).unwrap();
    assert_eq!(out.log.len(), 2);
    assert_eq!(out.checkpoint.epoch, 1);
}

#[test]
fn best_epoch_is_selected_on_validation() {
    let (_, out) = toy_fit(12);
    let best = out.log.iter().map(|e| e.val_f1).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.checkpoint.best_validation_micro_f1, best);
    let first_best = out.log.iter().find(|e| e.val_f1 == best).unwrap().epoch;
    assert_eq!(out.checkpoint.epoch, first_best);
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let (data, out) = toy_fit(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&out.checkpoint, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    assert_eq!(evaluate(&loaded, &data, None).unwrap(), evaluate(&out.checkpoint, &data, None).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (_, out) = toy_fit(1);
    let json = out.checkpoint.to_json();
    assert!(matches!(Checkpoint::from_json(&json[..json.len() / 2]), Err(TrainError::Parse(_))));

    let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
    value["schema_version"] = 2.into();
    assert!(matches!(
        Checkpoint::from_json(&value.to_string()),
        Err(TrainError::SchemaVersionMismatch { found: Some(2), expected: 1 })
    ));

    let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
    value["model"]["sac"]["bias"].as_array_mut().unwrap().pop();
    assert!(matches!(Checkpoint::from_json(&value.to_string()), Err(TrainError::InvalidCheckpoint(_))));

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(&dir.path().join("missing.json")), Err(TrainError::Io { .. })));
}

fn toy_store(data: &[LabeledExample], h: usize) -> EmbeddingStore {
    let mut store = EmbeddingStore::new(h);
    for ex in data {
        for (j, tokens) in ex.chunked.valid_chunks() {
            let mut v = vec![0.1f32; h];
            v[0] = if tokens.iter().any(|t| t == "alpha") { 1.0 } else { -1.0 };
            v[1] = if tokens.iter().any(|t| t == "beta") { 1.0 } else { -1.0 };
            store.insert(&ex.doc_id, j, v).unwrap();
        }
    }
    store
}

#[test]
fn store_mode_trains_classifier_only() {
    let (data, ctx) = toy_setup(40);
    let store = toy_store(&data, 6);
    let cfg = TrainConfig { learning_rate: 5e-2, ..toy_config(40) };
    let out = fit(&data, &[], EncoderMode::Store(&store), &cfg, &ctx).unwrap();
    let ckpt = out.checkpoint;
    assert!(ckpt.model.encoder.is_none() && ckpt.model.token_vocab.is_none());
    assert_eq!(ckpt.model.sac.h, 6);
    assert_eq!(ckpt.model.mode_name(), "store");
    assert_eq!(evaluate(&ckpt, &data, Some(&store)).unwrap().micro_f1, 1.0);
    assert!(matches!(evaluate(&ckpt, &data, None), Err(TrainError::ModeMismatch { .. })));

    let partial = toy_store(&data[..10], 6);
    assert!(matches!(evaluate(&ckpt, &data, Some(&partial)), Err(TrainError::Encoder { .. })));
}

#[test]
fn reference_checkpoint_rejects_store() {
    let (data, out) = toy_fit(1);
    let store = toy_store(&data, 16);
    assert!(matches!(evaluate(&out.checkpoint, &data, Some(&store)), Err(TrainError::ModeMismatch { .. })));
}

#[test]
fn empty_inputs() {
    let (data, ctx) = toy_setup(10);
    assert!(matches!(fit(&[], &data, reference(), &toy_config(1), &ctx), Err(TrainError::EmptyTrainingSet)));
    let (_, out) = toy_fit(1);
    assert!(matches!(evaluate(&out.checkpoint, &[], None), Err(TrainError::EmptyDataset)));
}

#[test]
fn target_width_is_checked() {
    let (mut data, ctx) = toy_setup(10);
    data[0].targets.push(true);
    assert!(matches!(fit(&data, &[], reference(), &toy_config(1), &ctx), Err(TrainError::TargetWidth { .. })));
}

#[test]
fn zero_classifier_predicts_nothing() {
    let (data, out) = toy_fit(1);
    let mut model: Model = out.checkpoint.model.clone();
    model.sac = SacParameters::zeros(model.sac.h, model.sac.c);
    let labels = out.checkpoint.label_vocab.labels().to_vec();
    let report = evaluate_model(&model, &data, None, 0.5, &labels).unwrap();
    for l in &report.per_label {
        assert_eq!((l.tp, l.fp), (0, 0));
    }
    assert_eq!(report.micro_f1, 0.0);
    for o in trainer::predict_all(&model, &data, None).unwrap() {
        assert!(o.scores.scores.iter().all(|&s| s == 0.5));
    }
}

proptest! {
    #[test]
    fn bce_is_nonnegative(scores in proptest::collection::vec(0.0f64..=1.0, 1..8), seed in any::<u64>()) {
        let targets: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        let (loss, grad) = bce_loss(&scores, &targets);
        prop_assert!(loss >= 0.0 && loss.is_finite());
        prop_assert!(grad.iter().all(|g| g.is_finite()));
    }
}
