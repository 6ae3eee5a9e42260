//! Evaluation: confusion matrices, the five classification metrics, and
//! report rendering.
//!
//! Metrics follow the standard one-vs-rest reduction per class: precision
//! `TP/(TP+FP)`, recall `TP/(TP+FN)`, F1 as their harmonic mean, and
//! specificity `TN/(TN+FP)`, with overall accuracy `trace/total`. A zero
//! denominator yields 0 and sets a `degenerate` flag instead of failing, so
//! extreme classifiers (all-positive, never-predicts-a-class) still produce
//! a report.

mod predict;
mod report;

pub use predict::{evaluate, predict, softmax, write_predictions_csv, Evaluation, Prediction};
pub use report::{render_report, ReportFormat};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and truth lengths differ: {pred} vs {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// Counts of true class (row) versus predicted class (column).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    class_names: Vec<String>,
}

impl ConfusionMatrix {
    /// Tally a confusion matrix from parallel label sequences.
    pub fn from_labels(
        truth: &[usize],
        pred: &[usize],
        class_names: Vec<String>,
    ) -> Result<Self, EvalError> {
        let n = class_names.len();
        if n < 2 {
            return Err(EvalError::TooFewClasses(n));
        }
        if truth.len() != pred.len() {
            return Err(EvalError::LengthMismatch {
                pred: pred.len(),
                truth: truth.len(),
            });
        }
        let mut counts = Array2::<u64>::zeros((n, n));
        for (&t, &p) in truth.iter().zip(pred.iter()) {
            if t >= n {
                return Err(EvalError::LabelOutOfRange {
                    label: t,
                    n_classes: n,
                });
            }
            if p >= n {
                return Err(EvalError::LabelOutOfRange {
                    label: p,
                    n_classes: n,
                });
            }
            counts[(t, p)] += 1;
        }
        Ok(Self {
            counts,
            class_names,
        })
    }

    /// Build directly from counts (rows = truth).
    pub fn from_counts(counts: Array2<u64>, class_names: Vec<String>) -> Result<Self, EvalError> {
        if class_names.len() < 2 {
            return Err(EvalError::TooFewClasses(class_names.len()));
        }
        if counts.nrows() != class_names.len() || counts.ncols() != class_names.len() {
            return Err(EvalError::LengthMismatch {
                pred: counts.ncols(),
                truth: counts.nrows(),
            });
        }
        Ok(Self {
            counts,
            class_names,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[(i, i)]).sum()
    }

    /// One-vs-rest reduction for one class: `(tp, fp, fn, tn)`.
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64, u64) {
        let n = self.n_classes();
        let tp = self.counts[(class, class)];
        let mut fp = 0;
        let mut fn_ = 0;
        for other in 0..n {
            if other != class {
                fp += self.counts[(other, class)];
                fn_ += self.counts[(class, other)];
            }
        }
        let tn = self.total() - tp - fp - fn_;
        (tp, fp, fn_, tn)
    }
}

/// Per-class one-vs-rest metrics. `degenerate` marks that at least one
/// denominator was zero and the affected metrics were reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub degenerate: bool,
}

/// The five-metric report of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment_name: String,
    pub accuracy: f64,
    pub total: u64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    /// The row conventionally reported for a binary experiment: the
    /// positive (pathology) class, index 1.
    pub fn positive_class(&self) -> Option<&ClassMetrics> {
        if self.per_class.len() == 2 {
            self.per_class.get(1)
        } else {
            None
        }
    }
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Compute accuracy and the per-class one-vs-rest metrics.
pub fn metrics(cm: &ConfusionMatrix, experiment_name: &str) -> Result<MetricsReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let accuracy = cm.trace() as f64 / total as f64;
    let per_class = (0..cm.n_classes())
        .map(|c| {
            let (tp, fp, fn_, tn) = cm.one_vs_rest(c);
            let mut degenerate = false;
            let precision = ratio(tp, tp + fp, &mut degenerate);
            let recall = ratio(tp, tp + fn_, &mut degenerate);
            let specificity = ratio(tn, tn + fp, &mut degenerate);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                degenerate = true;
                0.0
            };
            ClassMetrics {
                class: cm.class_names()[c].clone(),
                precision,
                recall,
                f1,
                specificity,
                degenerate,
            }
        })
        .collect();
    Ok(MetricsReport {
        experiment_name: experiment_name.to_string(),
        accuracy,
        total,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn binary_names() -> Vec<String> {
        vec!["Control".into(), "Pathology".into()]
    }

    #[test]
    fn perfect_prediction_is_diagonal_with_unit_metrics() {
        let truth = vec![0, 1, 2, 0, 1, 2, 1, 2, 0, 2];
        let cm = ConfusionMatrix::from_labels(
            &truth,
            &truth,
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        assert_eq!(cm.trace(), 10);
        assert_eq!(cm.total(), 10);
        let report = metrics(&cm, "perfect").unwrap();
        assert_eq!(report.accuracy, 1.0);
        for c in &report.per_class {
            assert_eq!(c.precision, 1.0);
            assert_eq!(c.recall, 1.0);
            assert_eq!(c.f1, 1.0);
            assert_eq!(c.specificity, 1.0);
            assert!(!c.degenerate);
        }
    }

    #[test]
    fn all_positive_predictor_on_balanced_truth() {
        // 100 examples, half positive; predictor says positive always.
        let truth: Vec<usize> = (0..100).map(|i| usize::from(i < 50)).collect();
        let pred = vec![1usize; 100];
        let cm = ConfusionMatrix::from_labels(&truth, &pred, binary_names()).unwrap();
        let (tp, fp, fn_, tn) = cm.one_vs_rest(1);
        assert_eq!((tp, fp, fn_, tn), (50, 50, 0, 0));
        let report = metrics(&cm, "degenerate").unwrap();
        let pos = report.positive_class().unwrap();
        assert_eq!(pos.precision, 0.5);
        assert_eq!(pos.recall, 1.0);
        assert_eq!(pos.specificity, 0.0);
        assert!(!pos.degenerate);
        // the control row never gets predicted: zero denominators flagged
        let neg = &report.per_class[0];
        assert_eq!(neg.precision, 0.0);
        assert!(neg.degenerate);
    }

    #[test]
    fn random_multiclass_matches_brute_force_tally() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let truth: Vec<usize> = (0..500).map(|_| rng.random_range(0..5)).collect();
        let pred: Vec<usize> = (0..500).map(|_| rng.random_range(0..5)).collect();
        let names: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let cm = ConfusionMatrix::from_labels(&truth, &pred, names).unwrap();
        // independent per-cell recount
        for t in 0..5 {
            for p in 0..5 {
                let expected = truth
                    .iter()
                    .zip(&pred)
                    .filter(|(&a, &b)| a == t && b == p)
                    .count() as u64;
                assert_eq!(cm.counts()[(t, p)], expected);
            }
        }
        assert_eq!(cm.total(), 500);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        assert!(matches!(
            ConfusionMatrix::from_labels(&[0, 2], &[0, 0], binary_names()),
            Err(EvalError::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let cm = ConfusionMatrix::from_labels(&[], &[], binary_names()).unwrap();
        assert!(matches!(metrics(&cm, "x"), Err(EvalError::EmptyMatrix)));
    }

    #[test]
    fn f1_is_harmonic_mean_when_defined() {
        let cm = ConfusionMatrix::from_counts(
            array![[40u64, 10], [20, 30]],
            binary_names(),
        )
        .unwrap();
        let report = metrics(&cm, "x").unwrap();
        for c in &report.per_class {
            if c.precision + c.recall > 0.0 {
                let expected = 2.0 * c.precision * c.recall / (c.precision + c.recall);
                assert!((c.f1 - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn binary_metrics_survive_collapsing_a_five_class_matrix() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let truth5: Vec<usize> = (0..400).map(|_| rng.random_range(0..5)).collect();
        let pred5: Vec<usize> = (0..400).map(|_| rng.random_range(0..5)).collect();
        // collapse: class 0 stays control, anything else is pathology
        let truth2: Vec<usize> = truth5.iter().map(|&v| usize::from(v != 0)).collect();
        let pred2: Vec<usize> = pred5.iter().map(|&v| usize::from(v != 0)).collect();
        let direct =
            ConfusionMatrix::from_labels(&truth2, &pred2, binary_names()).unwrap();

        let names5: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let cm5 = ConfusionMatrix::from_labels(&truth5, &pred5, names5).unwrap();
        let mut collapsed = ndarray::Array2::<u64>::zeros((2, 2));
        for t in 0..5 {
            for p in 0..5 {
                collapsed[(usize::from(t != 0), usize::from(p != 0))] += cm5.counts()[(t, p)];
            }
        }
        let collapsed = ConfusionMatrix::from_counts(collapsed, binary_names()).unwrap();
        assert_eq!(
            metrics(&direct, "x").unwrap().per_class,
            metrics(&collapsed, "x").unwrap().per_class
        );
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_permutation_invariant(
            seed in 0u64..500,
            n in 2usize..200,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
            let cm = ConfusionMatrix::from_labels(&truth, &pred, names.clone()).unwrap();
            prop_assert_eq!(cm.total() as usize, n);
            let report = metrics(&cm, "p").unwrap();
            prop_assert!((0.0..=1.0).contains(&report.accuracy));
            for c in &report.per_class {
                prop_assert!((0.0..=1.0).contains(&c.precision));
                prop_assert!((0.0..=1.0).contains(&c.recall));
                prop_assert!((0.0..=1.0).contains(&c.f1));
                prop_assert!((0.0..=1.0).contains(&c.specificity));
                prop_assert!(c.f1 <= c.precision.max(c.recall) + 1e-12);
                if c.precision + c.recall > 0.0 {
                    let hm = 2.0 * c.precision * c.recall / (c.precision + c.recall);
                    prop_assert!((c.f1 - hm).abs() < 1e-12);
                }
            }

            // jointly permuting (pred, truth) pairs changes nothing
            let mut order: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let truth_p: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
            let pred_p: Vec<usize> = order.iter().map(|&i| pred[i]).collect();
            let cm_p = ConfusionMatrix::from_labels(&truth_p, &pred_p, names).unwrap();
            prop_assert_eq!(cm.counts(), cm_p.counts());
        }
    }
}
