//! Model prediction over a test split.

use super::{metrics, ConfusionMatrix, EvalError, MetricsReport};
use crate::corpus::{Manifest, SplitSpec};
use crate::dsp::FeatureStore;
use crate::io_util::atomic_write;
use crate::model::{EncoderModel, Scalar};
use crate::train::argmax;
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use std::path::Path;

/// One scored utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub utterance_id: String,
    pub true_label: usize,
    pub pred_label: usize,
    /// Softmax probabilities, one per class, summing to 1.
    pub probs: Vec<f32>,
}

/// Softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Array1<T>) -> Array1<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut probs = logits.mapv(|v| (v - max).exp());
    let sum = probs.iter().copied().sum::<T>();
    probs.mapv_inplace(|v| v / sum);
    probs
}

/// Run the model over a list of utterances in the given order.
/// Deterministic: eval-mode forwards, ties broken toward the lower class.
pub fn predict<T: Scalar>(
    model: &EncoderModel<T>,
    ids: &[String],
    truths: &[usize],
    store: &FeatureStore,
) -> Result<Vec<Prediction>, EvalError> {
    if ids.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            pred: ids.len(),
            truth: truths.len(),
        });
    }
    ids.par_iter()
        .zip(truths.par_iter())
        .map(|(id, &true_label)| {
            let mel = store.get(id)?;
            let input: Array2<T> = mel.values.mapv(|v| T::from_f32(v).expect("finite feature"));
            let logits = model.forward(&input)?;
            let probs = softmax(&logits);
            Ok(Prediction {
                utterance_id: id.clone(),
                true_label,
                pred_label: argmax(&logits),
                probs: probs.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            })
        })
        .collect()
}

/// Everything the evaluation of one split produces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
}

/// Score a model on the test side of a split: per-utterance predictions in
/// manifest order, the confusion matrix, and the metric report.
pub fn evaluate<T: Scalar>(
    model: &EncoderModel<T>,
    split: &SplitSpec,
    manifest: &Manifest,
    store: &FeatureStore,
) -> Result<Evaluation, EvalError> {
    let truths: Vec<usize> = split
        .test_ids
        .iter()
        .map(|id| manifest.label_of(id, split.label_scheme))
        .collect::<Result<_, _>>()?;
    let predictions = predict(model, &split.test_ids, &truths, store)?;
    let preds: Vec<usize> = predictions.iter().map(|p| p.pred_label).collect();
    let confusion =
        ConfusionMatrix::from_labels(&truths, &preds, split.label_scheme.class_names())?;
    let report = metrics(&confusion, &split.experiment_name)?;
    Ok(Evaluation {
        predictions,
        confusion,
        report,
    })
}

/// Write predictions as CSV: `utterance_id,true_label,pred_label,prob_0..`.
pub fn write_predictions_csv(path: &Path, predictions: &[Prediction]) -> Result<(), EvalError> {
    let n_classes = predictions.first().map_or(0, |p| p.probs.len());
    let mut out = String::from("utterance_id,true_label,pred_label");
    for c in 0..n_classes {
        out.push_str(&format!(",prob_{c}"));
    }
    out.push('\n');
    for p in predictions {
        out.push_str(&format!(
            "{},{},{}",
            p.utterance_id, p.true_label, p.pred_label
        ));
        for prob in &p.probs {
            out.push_str(&format!(",{prob}"));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}
