//! Classification metrics shared by federated and centralized evaluation.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::ModelState;

/// Counts of (true class, predicted class) pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Plain accuracy: diagonal mass over total.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        correct as f64 / total as f64
    }
}

/// Builds the confusion matrix; entry `(t, p)` counts samples with true
/// class `t` predicted as `p`.
pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = vec![0u64; num_classes * num_classes];
    for (&p, &t) in preds.iter().zip(labels.iter()) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Validation(format!(
                "class out of range: true {t}, predicted {p}, {num_classes} classes"
            )));
        }
        counts[t * num_classes + p] += 1;
    }
    Ok(ConfusionMatrix {
        num_classes,
        counts,
    })
}

/// Mean per-class recall over the classes that actually appear; classes
/// with no true samples are excluded from the mean.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let mut acc = 0.0;
    let mut present = 0usize;
    for c in 0..cm.num_classes() {
        let row_total: u64 = (0..cm.num_classes()).map(|p| cm.count(c, p)).sum();
        if row_total > 0 {
            acc += cm.count(c, c) as f64 / row_total as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::Validation(
            "balanced accuracy of an empty confusion matrix".into(),
        ));
    }
    Ok(acc / present as f64)
}

/// Eval-mode accuracy and balanced accuracy of a model on a dataset.
pub fn evaluate(model: &ModelState, ds: &Dataset) -> Result<(f64, f64)> {
    let batch = ds.full_batch()?;
    let preds = model.predict_classes(&batch)?;
    let classes = ds.num_classes.max(model.spec.num_classes);
    let cm = confusion_matrix(&preds, &ds.labels, classes)?;
    Ok((cm.accuracy(), balanced_accuracy(&cm)?))
}
