use super::{EvalError, Result};
use crate::gateway::top_class_of;
use serde::{Deserialize, Serialize};

/// Counts of (true class, predicted class) pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    /// Row = true class, column = predicted class.
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = classes.len();
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(EvalError::Config(format!(
                "confusion matrix must be {n}x{n}"
            )));
        }
        Ok(Self { classes, counts })
    }

    /// Accumulates the top class of every probability row.
    pub fn from_predictions(
        classes: Vec<String>,
        rows: &[Vec<f64>],
        labels: &[usize],
    ) -> Result<Self> {
        let mut cm = Self::new(classes);
        if rows.len() != labels.len() {
            return Err(EvalError::Data(format!(
                "{} predictions for {} labels",
                rows.len(),
                labels.len()
            )));
        }
        for (row, &label) in rows.iter().zip(labels) {
            cm.add(label, top_class_of(row).0)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let n = self.num_classes();
        if truth >= n || predicted >= n {
            return Err(EvalError::Data(format!(
                "class index out of range for {n} classes"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True samples of this class.
    pub support: u64,
    pub predicted: u64,
    /// Set when a metric had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Always `"macro"`: unweighted mean over classes.
    pub averaging: String,
    pub classes: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

impl MetricsReport {
    pub fn has_zero_division(&self) -> bool {
        self.classes.iter().any(|c| c.zero_division)
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Per-class precision, recall and F1, their macro averages and accuracy.
/// Zero denominators give 0 and set the class's `zero_division` flag.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let n = cm.num_classes();
    let classes: Vec<ClassMetrics> = (0..n)
        .map(|k| {
            let tp = cm.get(k, k);
            let support: u64 = cm.counts[k].iter().sum();
            let predicted: u64 = (0..n).map(|t| cm.get(t, k)).sum();
            let (precision, zp) = ratio(tp, predicted);
            let (recall, zr) = ratio(tp, support);
            let (f1, zf) = if precision + recall > 0.0 {
                (2.0 * precision * recall / (precision + recall), false)
            } else {
                (0.0, true)
            };
            ClassMetrics {
                class: cm.classes[k].clone(),
                precision,
                recall,
                f1,
                support,
                predicted,
                zero_division: zp || zr || zf,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / n as f64;
    Ok(MetricsReport {
        averaging: "macro".into(),
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        accuracy: cm.trace() as f64 / total as f64,
        total,
        classes,
    })
}
