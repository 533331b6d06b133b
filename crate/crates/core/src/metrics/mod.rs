//! Classification scores and the supervised baseline.
//!
//! Precision, recall and F1 are one-vs-rest per class; means are unweighted
//! averages over classes. Per-class accuracy is the share of that class's
//! samples predicted correctly (the confusion-matrix diagonal over the row
//! sum).

mod baseline;

use std::fmt::Write as _;

pub use baseline::{train_baseline, BaselineConfig, BASELINE_HIDDEN};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no predictions to evaluate")]
    Empty,
    #[error("{predictions} predictions for {truths} truths")]
    Length { predictions: usize, truths: usize },
    #[error("class {class} outside 0..{classes}")]
    ClassOutOfRange { class: usize, classes: usize },
}

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, prediction: usize) -> Result<(), MetricsError> {
        for class in [truth, prediction] {
            if class >= self.classes {
                return Err(MetricsError::ClassOutOfRange {
                    class,
                    classes: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + prediction] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, prediction: usize) -> u64 {
        self.counts[truth * self.classes + prediction]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn column_sum(&self, prediction: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, prediction)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Fraction of correct predictions.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(
            self.classes, other.classes,
            "merging confusion matrices of different size"
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Text grid with rows = true class, columns = predicted class, and the
    /// overall accuracy in percent underneath.
    pub fn to_grid(&self, names: &[String]) -> String {
        let label = |c: usize| names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let width = (0..self.classes)
            .map(|c| label(c).len())
            .chain(self.counts.iter().map(|n| n.to_string().len()))
            .chain(std::iter::once(9))
            .max()
            .unwrap_or(9);
        let mut out = format!("{:>width$}", "true\\pred");
        for p in 0..self.classes {
            let _ = write!(out, " {:>width$}", label(p));
        }
        out.push('\n');
        for t in 0..self.classes {
            let _ = write!(out, "{:>width$}", label(t));
            for p in 0..self.classes {
                let _ = write!(out, " {:>width$}", self.get(t, p));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "acc = {:.2}", 100.0 * self.accuracy());
        out
    }
}

/// Scores of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    /// Number of samples whose true class is `class`.
    pub support: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// A zero denominator was replaced by 0.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    /// Fraction of all predictions that are correct.
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub mean_accuracy: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
}

/// `2 p r / (p + r)`, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Scores for a finished confusion matrix.
pub fn report(confusion: ConfusionMatrix) -> MetricsReport {
    let k = confusion.classes();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = confusion.get(c, c);
        let actual = confusion.row_sum(c);
        let predicted = confusion.column_sum(c);
        let ratio = |den: u64| {
            if den == 0 {
                0.0
            } else {
                tp as f64 / den as f64
            }
        };
        let precision = ratio(predicted);
        let recall = ratio(actual);
        per_class.push(ClassMetrics {
            class: c,
            support: actual,
            accuracy: recall,
            precision,
            recall,
            f1: f1_score(precision, recall),
            flagged: actual == 0 || predicted == 0,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if k == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / k as f64
        }
    };
    MetricsReport {
        accuracy: confusion.accuracy(),
        mean_accuracy: mean(|m| m.accuracy),
        mean_precision: mean(|m| m.precision),
        mean_recall: mean(|m| m.recall),
        mean_f1: mean(|m| m.f1),
        per_class,
        confusion,
    }
}

/// Scores `predictions` against `truths` over classes `0..classes`.
pub fn evaluate_with_classes(
    predictions: &[usize],
    truths: &[usize],
    classes: usize,
) -> Result<MetricsReport, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::Length {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in predictions.iter().zip(truths) {
        cm.add(t, p)?;
    }
    Ok(report(cm))
}

/// As [`evaluate_with_classes`] with the class count taken from the largest
/// id present.
pub fn evaluate(predictions: &[usize], truths: &[usize]) -> Result<MetricsReport, MetricsError> {
    let classes = predictions.iter().chain(truths).max().map_or(0, |m| m + 1);
    evaluate_with_classes(predictions, truths, classes)
}

impl MetricsReport {
    /// `class,support,accuracy,precision,recall,f1,flagged` per class, then
    /// a `mean` row and an `overall` accuracy row.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("class,support,accuracy,precision,recall,f1,flagged\n");
        for m in &self.per_class {
            let name = names
                .get(m.class)
                .cloned()
                .unwrap_or_else(|| m.class.to_string());
            let _ = writeln!(
                out,
                "{name},{},{:.6},{:.6},{:.6},{:.6},{}",
                m.support, m.accuracy, m.precision, m.recall, m.f1, m.flagged
            );
        }
        let _ = writeln!(
            out,
            "mean,{},{:.6},{:.6},{:.6},{:.6},{}",
            self.confusion.total(),
            self.mean_accuracy,
            self.mean_precision,
            self.mean_recall,
            self.mean_f1,
            self.per_class.iter().any(|m| m.flagged)
        );
        let _ = writeln!(
            out,
            "overall,{},{:.6},,,,",
            self.confusion.total(),
            self.accuracy
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let r = evaluate(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class.iter().all(|m| m.f1 == 1.0 && !m.flagged));
    }

    #[test]
    fn f1_formula() {
        assert!((f1_score(0.5, 1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
        assert_eq!(f1_score(0.3, 0.8), f1_score(0.8, 0.3));
    }

    #[test]
    fn precision_and_recall() {
        // class 0: tp 1, fn 1, fp 1.
        let r = evaluate(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(r.per_class[0].precision, 0.5);
        assert_eq!(r.per_class[0].recall, 0.5);
        assert_eq!(r.confusion.get(0, 1), 1);
    }

    #[test]
    fn absent_class_is_flagged() {
        let r = evaluate_with_classes(&[0, 0], &[0, 0], 3).unwrap();
        assert!(r.per_class[2].flagged);
        assert_eq!(r.per_class[2].f1, 0.0);
        assert!((r.mean_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert_eq!(evaluate(&[], &[]), Err(MetricsError::Empty));
        assert!(matches!(
            evaluate(&[1], &[1, 2]),
            Err(MetricsError::Length { .. })
        ));
        assert!(matches!(
            evaluate_with_classes(&[4], &[0], 2),
            Err(MetricsError::ClassOutOfRange { class: 4, .. })
        ));
    }

    #[test]
    fn grid_and_csv() {
        let r = evaluate(&[0, 1, 1], &[0, 1, 0]).unwrap();
        let names = vec!["empty".to_string(), "walk".to_string()];
        let grid = r.confusion.to_grid(&names);
        assert!(grid.contains("acc = 66.67"));
        let csv = r.to_csv(&names);
        assert!(csv.starts_with("class,support"));
        assert!(csv.contains("\nempty,2,0.500000"));
    }
}
