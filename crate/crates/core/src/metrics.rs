//! Accuracy, all-points average precision and confusion matrices.

use crate::error::{Error, Result};

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// All-points AP of one score column. Samples are ranked by descending score,
/// ties by ascending index. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    /// AP per class; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes that have at least one positive.
    pub map: f64,
    pub excluded: Vec<usize>,
}

/// `scores` is row-major `N × classes`.
pub fn mean_average_precision(scores: &[f64], classes: usize, truth: &[usize]) -> Result<ApReport> {
    let n = truth.len();
    if n == 0 || classes == 0 || scores.len() != n * classes {
        return Err(Error::ShapeMismatch {
            op: "mean_average_precision",
            lhs: vec![n, classes],
            rhs: vec![scores.len()],
        });
    }
    if let Some(&bad) = truth.iter().find(|&&t| t >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut excluded = Vec::new();
    for g in 0..classes {
        let col: Vec<f64> = (0..n).map(|i| scores[i * classes + g]).collect();
        let pos: Vec<bool> = truth.iter().map(|&t| t == g).collect();
        let ap = average_precision(&col, &pos);
        if ap.is_none() {
            excluded.push(g);
        }
        per_class.push(ap);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("no class has a positive sample"));
    }
    let map = present.iter().sum::<f64>() / present.len() as f64;
    Ok(ApReport {
        per_class,
        map,
        excluded,
    })
}

/// `confusion[t][p]` counts samples of true class `t` predicted as `p`.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "confusion_matrix",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::invalid(format!("label out of range for {classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub confusion: Vec<Vec<usize>>,
    pub loss: f64,
}

impl MetricsReport {
    /// Builds the report from row-major class probabilities.
    pub fn from_scores(scores: &[f64], classes: usize, truth: &[usize], loss: f64) -> Result<Self> {
        if scores.len() != truth.len() * classes {
            return Err(Error::ShapeMismatch {
                op: "MetricsReport",
                lhs: vec![truth.len(), classes],
                rhs: vec![scores.len()],
            });
        }
        let pred: Vec<usize> = scores.chunks(classes).map(crate::model::argmax).collect();
        let ap = mean_average_precision(scores, classes, truth)?;
        Ok(Self {
            accuracy: accuracy(&pred, truth)?,
            per_class_ap: ap.per_class,
            map: ap.map,
            confusion: confusion_matrix(&pred, truth, classes)?,
            loss,
        })
    }

    pub fn summary(&self) -> String {
        let aps: Vec<String> = self
            .per_class_ap
            .iter()
            .map(|a| a.map_or("n/a".to_string(), |a| format!("{:.4}", a)))
            .collect();
        format!(
            "loss {:.6}  acc {:.4}  mAP {:.4}  AP [{}]",
            self.loss,
            self.accuracy,
            self.map,
            aps.join(", ")
        )
    }
}
