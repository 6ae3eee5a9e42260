//! Deterministic supervised fine-tuning.
//!
//! The recipe is fixed and small: cross-entropy loss, AdamW (or SGD) over
//! whatever parameters are currently trainable, a seeded shuffle per epoch,
//! and the final-epoch model as the deliverable. Everything is reproducible
//! from `(model seed, adapter seed, train seed)`; a NaN loss aborts the run
//! with the batch named rather than training through corrupted state.

pub mod checkpoint;
mod optim;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, CheckpointKind, CheckpointMeta,
};
pub use optim::OptimizerKind;

use crate::corpus::{CorpusError, Manifest, SplitSpec};
use crate::dsp::{DspError, FeatureStore};
use crate::io_util::atomic_write;
use crate::model::{EncoderModel, Gradients, ModelError, Scalar};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("model has {model} classes but the split labels {scheme}")]
    ClassCountMismatch { model: usize, scheme: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (first utterance {first_utterance})")]
    NanLoss {
        epoch: usize,
        batch: usize,
        first_utterance: String,
    },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("bad history file {path}: {reason}")]
    BadHistory {
        path: std::path::PathBuf,
        reason: String,
    },
}

/// Training hyperparameters. Defaults mirror the reference recipe:
/// 10 epochs, batch size 8, learning rate 1e-3, AdamW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::AdamW,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) && self.learning_rate != 0.0 {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch of history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub wall_time_s: f64,
}

/// Per-epoch training records, serialized as JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.accuracy)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_loss).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("serializable record"));
            out.push('\n');
        }
        atomic_write(path, out.as_bytes()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record =
                serde_json::from_str(line).map_err(|e| TrainError::BadHistory {
                    path: path.to_path_buf(),
                    reason: format!("line {}: {e}", i + 1),
                })?;
            records.push(record);
        }
        Ok(Self { records })
    }
}

/// Numerically stable cross-entropy of one logit vector against a class
/// index. Returns the loss and its gradient with respect to the logits
/// (`softmax - onehot`).
pub fn cross_entropy<T: Scalar>(
    logits: &Array1<T>,
    label: usize,
) -> Result<(T, Array1<T>), TrainError> {
    let n = logits.len();
    if label >= n {
        return Err(TrainError::LabelOutOfRange {
            label,
            n_classes: n,
        });
    }
    // non-finite logits must surface as a NaN loss, not be clamped away
    if logits.iter().any(|v| !v.is_finite()) {
        return Ok((T::nan(), logits.mapv(|_| T::nan())));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut probs = logits.mapv(|v| (v - max).exp());
    let sum = probs.iter().copied().sum::<T>();
    probs.mapv_inplace(|v| v / sum);
    let loss = -(probs[label].max(T::min_positive_value())).ln();
    let mut dlogits = probs;
    dlogits[label] = dlogits[label] - T::one();
    Ok((loss, dlogits))
}

/// Train `model` on the split's training ids.
///
/// Features come from `store`; labels are resolved through the manifest
/// under the split's label scheme. The shuffle, dropout draws, and the
/// whole parameter trajectory are functions of `config.seed`.
pub fn train<T: Scalar>(
    model: &mut EncoderModel<T>,
    split: &SplitSpec,
    manifest: &Manifest,
    store: &FeatureStore,
    config: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    config.validate()?;
    let n_classes = model.config().n_classes;
    let scheme_classes = split.label_scheme.n_classes();
    if n_classes != scheme_classes {
        return Err(TrainError::ClassCountMismatch {
            model: n_classes,
            scheme: scheme_classes,
        });
    }
    if split.train_ids.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }

    // resolve labels and check feature presence up front
    let mut examples: Vec<(String, usize)> = Vec::with_capacity(split.train_ids.len());
    for id in &split.train_ids {
        if !store.contains(id) {
            return Err(TrainError::Dsp(DspError::MissingFeature {
                utterance_id: id.clone(),
            }));
        }
        let label = manifest.label_of(id, split.label_scheme)?;
        if label >= n_classes {
            return Err(TrainError::LabelOutOfRange { label, n_classes });
        }
        examples.push((id.clone(), label));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = optim::Optimizer::<T>::new(config.optimizer, config.learning_rate);
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let start = std::time::Instant::now();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        if config.shuffle {
            order.shuffle(&mut rng);
        }

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            // per-example dropout streams drawn up front so the batch can
            // fan out without sharing the rng
            let batch_jobs: Vec<(usize, u64)> =
                batch.iter().map(|&i| (i, rng.random::<u64>())).collect();

            let results: Result<Vec<(f64, bool, Gradients<T>)>, TrainError> = batch_jobs
                .par_iter()
                .map(|&(example_idx, dropout_seed)| {
                    let (id, label) = &examples[example_idx];
                    let mel = store.get(id)?;
                    let input: Array2<T> =
                        mel.values.mapv(|v| T::from_f32(v).expect("finite feature"));
                    let mut example_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                    let (logits, tape) = model.forward_train(&input, &mut example_rng)?;
                    let (loss, dlogits) = cross_entropy(&logits, *label)?;
                    let pred = argmax(&logits);
                    let grads = model.backward(&tape, &dlogits);
                    Ok((
                        loss.to_f64().unwrap_or(f64::NAN),
                        pred == *label,
                        grads,
                    ))
                })
                .collect();
            let results = results?;

            if results.iter().any(|(loss, _, _)| !loss.is_finite()) {
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: batch_idx,
                    first_utterance: examples[batch[0]].0.clone(),
                });
            }

            let batch_len = results.len();
            let mut batch_grads = Gradients::<T>::new();
            for (loss, hit, grads) in results {
                loss_sum += loss;
                correct += usize::from(hit);
                batch_grads.merge(grads);
            }
            batch_grads.scale(T::one() / T::from_usize(batch_len).unwrap());
            optimizer.step(model, &batch_grads);
        }

        history.records.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / examples.len() as f64,
            accuracy: correct as f64 / examples.len() as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }

    if !model.all_finite() {
        return Err(TrainError::Model(ModelError::NonFinite(
            "parameters after training".into(),
        )));
    }
    Ok(history)
}

/// Index of the largest logit; ties resolve to the lowest class index.
pub fn argmax<T: Scalar>(logits: &Array1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        Cohort, Gender, LabelScheme, SpeakerRecord, Task, Tier, UtteranceRecord,
    };
    use crate::dsp::MelSpectrogram;
    use crate::model::EncoderConfig;

    fn toy_encoder_config(n_classes: usize) -> EncoderConfig {
        EncoderConfig {
            n_mels: 8,
            max_frames: 8,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_mlp: Some(16),
            n_classes,
            seed: 7,
            ..EncoderConfig::default()
        }
    }

    /// Two speakers per cohort, `files` utterances each; feature matrices
    /// are separable by construction (energy in the top vs bottom half of
    /// the mel rows, plus a little noise).
    fn toy_task(
        dir: &Path,
        files: usize,
    ) -> (Manifest, SplitSpec, FeatureStore) {
        use rand::Rng;
        let speakers = vec![
            SpeakerRecord {
                speaker_id: "CM01".into(),
                cohort: Cohort::Control,
                gender: Gender::Male,
                age: None,
                intelligibility_pct: None,
                tier: Tier::Control,
            },
            SpeakerRecord {
                speaker_id: "CF01".into(),
                cohort: Cohort::Control,
                gender: Gender::Female,
                age: None,
                intelligibility_pct: None,
                tier: Tier::Control,
            },
            SpeakerRecord {
                speaker_id: "M05".into(),
                cohort: Cohort::Pathology,
                gender: Gender::Male,
                age: Some(21),
                intelligibility_pct: Some(58.0),
                tier: Tier::Medium,
            },
            SpeakerRecord {
                speaker_id: "M11".into(),
                cohort: Cohort::Pathology,
                gender: Gender::Male,
                age: Some(48),
                intelligibility_pct: Some(62.0),
                tier: Tier::Medium,
            },
        ];
        let mut utterances = Vec::new();
        for s in &speakers {
            for i in 0..files {
                utterances.push(UtteranceRecord {
                    utterance_id: format!("{}_CW{:03}_R1", s.speaker_id, i),
                    speaker_id: s.speaker_id.clone(),
                    task: Task::CommonWord,
                    repetition: 1,
                    audio_path: format!("{}/{i}.wav", s.speaker_id).into(),
                    label: s.tier,
                });
            }
        }
        let manifest = Manifest::new(speakers, utterances).unwrap();

        let mut store = FeatureStore::create(dir).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for u in manifest.utterances() {
            let pathological = u.label != Tier::Control;
            let values = ndarray::Array2::from_shape_fn((8, 8), |(r, _)| {
                let active = if pathological { r >= 4 } else { r < 4 };
                let base: f32 = if active { 1.0 } else { -1.0 };
                base + rng.random_range(-0.1..0.1)
            });
            store
                .insert(&MelSpectrogram {
                    values,
                    utterance_id: u.utterance_id.clone(),
                })
                .unwrap();
        }
        store.write_index().unwrap();

        // train on CM01 + M05, test on CF01 + M11: speaker-disjoint
        let train_ids = manifest
            .utterances()
            .iter()
            .filter(|u| u.speaker_id == "CM01" || u.speaker_id == "M05")
            .map(|u| u.utterance_id.clone())
            .collect();
        let test_ids = manifest
            .utterances()
            .iter()
            .filter(|u| u.speaker_id == "CF01" || u.speaker_id == "M11")
            .map(|u| u.utterance_id.clone())
            .collect();
        let split = SplitSpec {
            experiment_name: "toy".into(),
            label_scheme: LabelScheme::Binary,
            train_ids,
            test_ids,
        };
        (manifest, split, store)
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_k() {
        let (loss, dlogits) = cross_entropy(&Array1::from_vec(vec![0.0f64, 0.0]), 1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((dlogits[0] - 0.5).abs() < 1e-12);
        assert!((dlogits[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct_is_tiny() {
        let (loss, _) = cross_entropy(&Array1::from_vec(vec![20.0f64, -20.0]), 0).unwrap();
        assert!(loss < 1e-8, "loss {loss}");
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        assert!(matches!(
            cross_entropy(&Array1::from_vec(vec![0.0f64, 0.0]), 2),
            Err(TrainError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let logits = Array1::from_shape_fn(5, |_| rng.random_range(-2.0f64..2.0));
        let label = 3;
        let (_, dlogits) = cross_entropy(&logits, label).unwrap();
        for i in 0..5 {
            let eps = 1e-6;
            let mut plus = logits.clone();
            plus[i] += eps;
            let mut minus = logits.clone();
            minus[i] -= eps;
            let (lp, _) = cross_entropy(&plus, label).unwrap();
            let (lm, _) = cross_entropy(&minus, label).unwrap();
            let numeric = (lp - lm) / (2.0 * eps);
            assert!(
                (numeric - dlogits[i]).abs() < 1e-6,
                "{i}: {numeric} vs {}",
                dlogits[i]
            );
        }
    }

    #[test]
    fn training_learns_the_separable_toy_task() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, split, store) = toy_task(dir.path(), 12);
        let mut model = EncoderModel::<f32>::init(&toy_encoder_config(2)).unwrap();
        let config = TrainConfig {
            epochs: 15,
            batch_size: 4,
            learning_rate: 3e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &split, &manifest, &store, &config).unwrap();
        assert_eq!(history.records.len(), 15);
        assert!(
            history.final_accuracy().unwrap() >= 0.9,
            "final accuracy {:?}",
            history.final_accuracy()
        );
        let losses = history.losses();
        assert!(
            losses[0] > losses[1] && losses[1] > losses[2],
            "loss not decreasing over first epochs: {losses:?}"
        );
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, split, store) = toy_task(dir.path(), 4);
        let mut model = EncoderModel::<f32>::init(&toy_encoder_config(2)).unwrap();
        let mut before = Vec::new();
        model.for_each_param(&mut |_, _, data, _| {
            before.extend(data.iter().map(|v| v.to_bits()))
        });
        let config = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &split, &manifest, &store, &config).unwrap();
        let mut after = Vec::new();
        model.for_each_param(&mut |_, _, data, _| {
            after.extend(data.iter().map(|v| v.to_bits()))
        });
        assert_eq!(before, after, "parameters must be bitwise unchanged");
        let losses = history.losses();
        assert!(losses.windows(2).all(|w| w[0] == w[1]), "loss must be constant");
    }

    #[test]
    fn same_seed_reproduces_history() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, split, store) = toy_task(dir.path(), 6);
        let run = |seed: u64| {
            let mut model = EncoderModel::<f32>::init(&toy_encoder_config(2)).unwrap();
            let config = TrainConfig {
                epochs: 3,
                batch_size: 4,
                seed,
                ..TrainConfig::default()
            };
            train(&mut model, &split, &manifest, &store, &config).unwrap()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a.losses(), b.losses());
        let c = run(12);
        assert_ne!(a.losses(), c.losses(), "different seed, different shuffle");
    }

    #[test]
    fn frozen_base_is_bitwise_stable_across_training() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, split, store) = toy_task(dir.path(), 6);
        let lora = crate::lora::LoraConfig {
            rank: 2,
            ..Default::default()
        };
        let mut model = crate::lora::wrap_model(
            EncoderModel::<f32>::init(&toy_encoder_config(2)).unwrap(),
            &lora,
            5,
        )
        .unwrap();
        let mut base_before = Vec::new();
        model.for_each_param(&mut |name, _, data, trainable| {
            if !trainable {
                base_before.push((name.to_string(), data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()));
            }
        });
        let config = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        train(&mut model, &split, &manifest, &store, &config).unwrap();
        let mut base_after = Vec::new();
        model.for_each_param(&mut |name, _, data, trainable| {
            if !trainable {
                base_after.push((name.to_string(), data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()));
            }
        });
        assert_eq!(base_before, base_after);
    }

    #[test]
    fn missing_feature_is_reported_with_id() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, mut split, store) = toy_task(dir.path(), 2);
        split.train_ids.push("ghost_utterance".into());
        // unknown id: feature check fires first
        let mut model = EncoderModel::<f32>::init(&toy_encoder_config(2)).unwrap();
        let err = train(
            &mut model,
            &split,
            &manifest,
            &store,
            &TrainConfig::default(),
        )
        .unwrap_err();
        match err {
            TrainError::Dsp(DspError::MissingFeature { utterance_id }) => {
                assert_eq!(utterance_id, "ghost_utterance")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn nan_features_abort_with_batch_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, split, mut store) = toy_task(dir.path(), 2);
        // poison one training feature
        let poisoned = split.train_ids[0].clone();
        store
            .insert(&MelSpectrogram {
                values: ndarray::Array2::from_elem((8, 8), f32::NAN),
                utterance_id: poisoned,
            })
            .unwrap();
        let mut model = EncoderModel::<f32>::init(&toy_encoder_config(2)).unwrap();
        let config = TrainConfig {
            shuffle: false,
            ..TrainConfig::default()
        };
        let err = train(&mut model, &split, &manifest, &store, &config).unwrap_err();
        assert!(matches!(err, TrainError::NanLoss { epoch: 0, .. }));
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, split, store) = toy_task(dir.path(), 2);
        let mut model = EncoderModel::<f32>::init(&toy_encoder_config(5)).unwrap();
        assert!(matches!(
            train(
                &mut model,
                &split,
                &manifest,
                &store,
                &TrainConfig::default()
            ),
            Err(TrainError::ClassCountMismatch { model: 5, scheme: 2 })
        ));
    }

    #[test]
    fn history_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        let history = TrainHistory {
            records: vec![
                EpochRecord {
                    epoch: 0,
                    mean_loss: 0.7,
                    accuracy: 0.5,
                    wall_time_s: 0.01,
                },
                EpochRecord {
                    epoch: 1,
                    mean_loss: 0.4,
                    accuracy: 0.9,
                    wall_time_s: 0.01,
                },
            ],
        };
        history.write_jsonl(&path).unwrap();
        assert_eq!(TrainHistory::read_jsonl(&path).unwrap(), history);
    }
}
