//! Accuracy, per-class and averaged precision/recall/F1, and the confusion matrix.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::PrefixNetwork;
use crate::data::{make_batch, NormStats, Samples};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Module};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Which split the numbers were computed on.
    pub split: String,
    pub sample_count: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Support-weighted averages.
    pub weighted: Averages,
    pub macro_avg: Averages,
    /// Rows are true classes, columns predicted classes.
    pub confusion_matrix: Vec<Vec<u64>>,
    pub mean_loss: Option<f64>,
    pub warnings: Vec<String>,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

impl MetricsReport {
    pub fn from_confusion(matrix: Vec<Vec<u64>>, split: impl Into<String>) -> Result<Self> {
        let k = matrix.len();
        if matrix.iter().any(|row| row.len() != k) {
            return Err(Error::shape("confusion matrix", [k, k], matrix.iter().map(Vec::len).collect::<Vec<_>>()));
        }
        let total: u64 = matrix.iter().flatten().sum();
        if total == 0 {
            return Err(Error::EmptyDataset("cannot compute metrics over zero samples".into()));
        }
        let mut warnings = Vec::new();
        let mut per_class = Vec::with_capacity(k);
        for c in 0..k {
            let tp = matrix[c][c];
            let support: u64 = matrix[c].iter().sum();
            let predicted: u64 = matrix.iter().map(|row| row[c]).sum();
            let precision = if predicted > 0 {
                tp as f64 / predicted as f64
            } else {
                warnings.push(format!("class {c} is never predicted; precision set to 0"));
                0.0
            };
            let recall = if support > 0 {
                tp as f64 / support as f64
            } else {
                warnings.push(format!("class {c} has no samples; recall set to 0"));
                0.0
            };
            per_class.push(ClassMetrics { precision, recall, f1: f1(precision, recall), support });
        }
        let correct: u64 = (0..k).map(|c| matrix[c][c]).sum();
        let weighted_mean = |f: fn(&ClassMetrics) -> f64| {
            per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
        };
        let macro_mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
        Ok(MetricsReport {
            split: split.into(),
            sample_count: total,
            accuracy: correct as f64 / total as f64,
            weighted: Averages {
                precision: weighted_mean(|m| m.precision),
                recall: weighted_mean(|m| m.recall),
                f1: weighted_mean(|m| m.f1),
            },
            macro_avg: Averages {
                precision: macro_mean(|m| m.precision),
                recall: macro_mean(|m| m.recall),
                f1: macro_mean(|m| m.f1),
            },
            per_class,
            confusion_matrix: matrix,
            mean_loss: None,
            warnings,
        })
    }

    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        num_classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::shape("predictions", labels.len(), predictions.len()));
        }
        let mut m = vec![vec![0u64; num_classes]; num_classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= num_classes || l >= num_classes {
                return Err(Error::Data(format!("class index outside 0..{num_classes}: predicted {p}, true {l}")));
            }
            m[l][p] += 1;
        }
        Self::from_confusion(m, split)
    }

    /// `|weighted recall - accuracy|`, which is zero up to rounding for every matrix.
    pub fn recall_identity_gap(&self) -> f64 {
        (self.weighted.recall - self.accuracy).abs()
    }

    pub fn to_table(&self, class_names: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split: {}  samples: {}  accuracy: {:.4}", self.split, self.sample_count, self.accuracy);
        let _ = writeln!(s, "{:<16} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support");
        for (c, m) in self.per_class.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let _ = writeln!(s, "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>8}", name, m.precision, m.recall, m.f1, m.support);
        }
        for (name, a) in [("weighted avg", self.weighted), ("macro avg", self.macro_avg)] {
            let _ = writeln!(s, "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>8}", name, a.precision, a.recall, a.f1, self.sample_count);
        }
        s
    }

    pub fn confusion_csv(&self, class_names: &[String]) -> String {
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let k = self.confusion_matrix.len();
        let mut s = String::from("true\\predicted");
        for c in 0..k {
            s.push(',');
            s.push_str(&name(c));
        }
        s.push('\n');
        for (c, row) in self.confusion_matrix.iter().enumerate() {
            s.push_str(&name(c));
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluation-mode predictions over a whole split, with the mean cross-entropy.
pub fn evaluate(
    model: &PrefixNetwork<f32>,
    samples: &Samples,
    norm: &NormStats,
    batch_size: usize,
    split: &str,
) -> Result<MetricsReport> {
    let k = model.spec().num_classes;
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("{split} split is empty")));
    }
    if let Some(&l) = samples.labels().iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("{split} label {l} but the model has {k} classes")));
    }
    let channels = model.spec().input.channels;
    let all: Vec<usize> = (0..samples.len()).collect();
    let mut predictions = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    for chunk in all.chunks(batch_size.max(1)) {
        let x = make_batch(samples, chunk, norm, channels)?;
        let logits = model.forward(&x)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| samples.label(i)).collect();
        loss_sum += softmax_cross_entropy(&logits, &labels)?.loss as f64 * chunk.len() as f64;
        predictions.extend(logits.argmax_rows());
    }
    let mut report = MetricsReport::from_predictions(&predictions, samples.labels(), k, split)?;
    report.mean_loss = Some(loss_sum / samples.len() as f64);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn hand_computed_three_class_example() {
        let m = MetricsReport::from_confusion(vec![vec![2, 1, 0], vec![0, 3, 0], vec![1, 0, 3]], "toy").unwrap();
        assert!(close(m.accuracy, 0.8));
        // precision: 2/3, 3/4, 3/3; recall: 2/3, 3/3, 3/4
        let p = [2.0 / 3.0, 0.75, 1.0];
        let r = [2.0 / 3.0, 1.0, 0.75];
        let f = [2.0 / 3.0, 6.0 / 7.0, 6.0 / 7.0];
        for c in 0..3 {
            assert!(close(m.per_class[c].precision, p[c]));
            assert!(close(m.per_class[c].recall, r[c]));
            assert!(close(m.per_class[c].f1, f[c]));
        }
        // supports 3, 3, 4
        assert!(close(m.weighted.precision, (3.0 * p[0] + 3.0 * p[1] + 4.0 * p[2]) / 10.0));
        assert!(close(m.weighted.recall, 0.8));
        assert!(close(m.weighted.f1, (3.0 * f[0] + 3.0 * f[1] + 4.0 * f[2]) / 10.0));
        assert!(close(m.macro_avg.recall, (r[0] + r[1] + r[2]) / 3.0));
    }

    #[test]
    fn perfect_predictor() {
        let labels = [0, 1, 2, 2, 1];
        let m = MetricsReport::from_predictions(&labels, &labels, 3, "t").unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.weighted, Averages { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert_eq!(m.confusion_matrix, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn majority_predictor_on_default_synthetic_counts() {
        let counts = [159usize, 92, 92, 125, 255];
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let preds = vec![4; labels.len()];
        let m = MetricsReport::from_predictions(&preds, &labels, 5, "t").unwrap();
        assert!(close(m.accuracy, 255.0 / 723.0));
        assert_eq!(m.warnings.len(), 4);
        assert_eq!(m.per_class[0].precision, 0.0);
    }

    #[test]
    fn empty_and_ragged_inputs_fail() {
        assert!(MetricsReport::from_confusion(vec![vec![0, 0], vec![0, 0]], "t").is_err());
        assert!(MetricsReport::from_confusion(vec![vec![1, 0], vec![0]], "t").is_err());
        assert!(MetricsReport::from_predictions(&[3], &[0], 3, "t").is_err());
    }

    #[test]
    fn csv_and_table_render() {
        let m = MetricsReport::from_confusion(vec![vec![1, 0], vec![1, 2]], "t").unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        assert_eq!(m.confusion_csv(&names), "true\\predicted,a,b\na,1,0\nb,1,2\n");
        assert!(m.to_table(&names).contains("weighted avg"));
    }

    fn matrix() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (2usize..6).prop_flat_map(|k| proptest::collection::vec(proptest::collection::vec(0u64..20, k), k))
    }

    proptest! {
        #[test]
        fn weighted_recall_is_accuracy(m in matrix()) {
            prop_assume!(m.iter().flatten().sum::<u64>() > 0);
            let r = MetricsReport::from_confusion(m, "p").unwrap();
            prop_assert!(r.recall_identity_gap() < 1e-12);
            for v in [r.accuracy, r.weighted.precision, r.weighted.f1, r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn relabeling_permutes_per_class_only(m in matrix(), shift in 1usize..5) {
            prop_assume!(m.iter().flatten().sum::<u64>() > 0);
            let k = m.len();
            let perm = |c: usize| (c + shift) % k;
            let mut pm = vec![vec![0u64; k]; k];
            for i in 0..k {
                for j in 0..k {
                    pm[perm(i)][perm(j)] = m[i][j];
                }
            }
            let a = MetricsReport::from_confusion(m, "p").unwrap();
            let b = MetricsReport::from_confusion(pm, "p").unwrap();
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
            prop_assert!((a.weighted.f1 - b.weighted.f1).abs() < 1e-12);
            prop_assert!((a.macro_avg.precision - b.macro_avg.precision).abs() < 1e-12);
            for c in 0..k {
                prop_assert_eq!(&a.per_class[c], &b.per_class[perm(c)]);
            }
        }
    }
}
