//! Classification metrics.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub macro_f1: f64,
    pub accuracy: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_f1: Vec<Option<f64>>,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<usize>>,
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    m
}

pub fn classification_metrics(truth: &[usize], pred: &[usize], classes: usize) -> Metrics {
    assert_eq!(truth.len(), pred.len(), "prediction count");
    let confusion = confusion_matrix(truth, pred, classes);
    let mut per_class_f1 = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = confusion[c][c] as f64;
        let actual: usize = confusion[c].iter().sum();
        if actual == 0 {
            per_class_f1.push(None);
            continue;
        }
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let denom = actual as f64 + predicted as f64;
        per_class_f1.push(Some(if tp == 0.0 { 0.0 } else { 2.0 * tp / denom }));
    }
    let present: Vec<f64> = per_class_f1.iter().flatten().copied().collect();
    let macro_f1 = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    let accuracy = if truth.is_empty() {
        0.0
    } else {
        correct as f64 / truth.len() as f64
    };
    Metrics {
        macro_f1,
        accuracy,
        per_class_f1,
        confusion,
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 1];
        let m = classification_metrics(&y, &y, 3);
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn hand_worked_f1() {
        let m = classification_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
        assert!((m.per_class_f1[0].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.per_class_f1[1].unwrap() - 0.8).abs() < 1e-12);
        assert!((m.macro_f1 - 0.7333).abs() < 1e-4);
        assert_eq!(m.confusion, vec![vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn single_class_predictor() {
        let m = classification_metrics(&[0, 0, 1, 1], &[0, 0, 0, 0], 2);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.per_class_f1[1], Some(0.0));
    }

    #[test]
    fn absent_classes_do_not_count() {
        let m = classification_metrics(&[0, 0, 1], &[0, 2, 1], 3);
        assert_eq!(m.per_class_f1[2], None);
        assert!((m.macro_f1 - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
