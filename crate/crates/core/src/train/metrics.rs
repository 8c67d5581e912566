use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_head::{TaskLabels, NUM_TASKS, TASKS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Per-task accuracy in percent.
    pub accuracy: [f64; NUM_TASKS],
    pub avg: f64,
    /// Per-task macro-F1 in percent.
    pub f1: [f64; NUM_TASKS],
    pub mean_f1: f64,
    /// `confusion[task][truth][predicted]`
    pub confusion: Vec<Vec<Vec<usize>>>,
    pub samples: usize,
}

/// Arithmetic mean of per-task scores.
pub fn average(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_predictions(pred: &[TaskLabels], truth: &[TaskLabels]) -> Result<Self> {
        if pred.is_empty() {
            return Err(Error::Data("cannot evaluate an empty split".into()));
        }
        if pred.len() != truth.len() {
            return Err(Error::Data(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        let mut confusion: Vec<Vec<Vec<usize>>> = TASKS
            .iter()
            .map(|t| vec![vec![0; t.cardinality()]; t.cardinality()])
            .collect();
        for (p, y) in pred.iter().zip(truth) {
            for t in 0..NUM_TASKS {
                let k = TASKS[t].cardinality();
                if p[t] >= k || y[t] >= k {
                    return Err(Error::Data(format!(
                        "class index out of range for task {}",
                        TASKS[t].name
                    )));
                }
                confusion[t][y[t]][p[t]] += 1;
            }
        }
        let n = pred.len();
        let mut accuracy = [0.0; NUM_TASKS];
        let mut f1 = [0.0; NUM_TASKS];
        for t in 0..NUM_TASKS {
            let c = &confusion[t];
            let k = c.len();
            let correct: usize = (0..k).map(|i| c[i][i]).sum();
            accuracy[t] = 100.0 * correct as f64 / n as f64;
            let mut sum = 0.0;
            for (j, row) in c.iter().enumerate() {
                let tp = row[j];
                let predicted: usize = c.iter().map(|r| r[j]).sum();
                let actual: usize = row.iter().sum();
                let (p, r) = (ratio(tp, predicted), ratio(tp, actual));
                sum += if p + r > 0.0 {
                    2.0 * p * r / (p + r)
                } else {
                    0.0
                };
            }
            f1[t] = 100.0 * sum / k as f64;
        }
        Ok(Self {
            avg: average(&accuracy),
            mean_f1: average(&f1),
            accuracy,
            f1,
            confusion,
            samples: n,
        })
    }

    /// Recall of `class` in `task` in percent; `None` when the class is absent.
    pub fn recall(&self, task: usize, class: usize) -> Option<f64> {
        let row = &self.confusion[task][class];
        let total: usize = row.iter().sum();
        (total > 0).then(|| 100.0 * row[class] as f64 / total as f64)
    }
}
