use serde::{Deserialize, Serialize};

use crate::data::{Window, WindowedSample};
use crate::error::{Error, Result};
use crate::model::Backbone;

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        Ok(Self {
            num_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Dimension(format!(
                "{} labels for {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let n = self.num_classes;
        if truth >= n || predicted >= n {
            return Err(Error::Data(format!(
                "class pair ({truth}, {predicted}) outside 0..{n}"
            )));
        }
        self.counts[truth * n + predicted] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn trace(&self) -> u64 {
        (0..self.num_classes).map(|c| self.get(c, c)).sum()
    }

    fn check_nonempty(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::UndefinedMetric("confusion matrix is empty".into())),
            t => Ok(t),
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.check_nonempty()?;
        Ok(self.trace() as f64 / total as f64)
    }

    /// Unweighted mean of per-class F1. A class with no true-positive
    /// counts has F1 = 0, including classes never seen or predicted.
    pub fn macro_f1(&self) -> Result<f64> {
        self.check_nonempty()?;
        let n = self.num_classes;
        let mut sum = 0.0;
        for c in 0..n {
            let tp = self.get(c, c) as f64;
            let support: u64 = (0..n).map(|p| self.get(c, p)).sum();
            let predicted: u64 = (0..n).map(|t| self.get(t, c)).sum();
            if tp > 0.0 {
                let precision = tp / predicted as f64;
                let recall = tp / support as f64;
                sum += 2.0 * precision * recall / (precision + recall);
            }
        }
        Ok(sum / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEvaluation {
    pub confusion: ConfusionMatrix,
    pub acc: f64,
    pub mf1: f64,
    pub n_windows: usize,
}

/// Window-level predictions of `model` scored against the held-out labels.
pub fn evaluate_user(model: &Backbone, samples: &[WindowedSample]) -> Result<UserEvaluation> {
    let n = model.config.num_classes;
    let truth: Vec<usize> = samples
        .iter()
        .map(|s| match s.label {
            Some(l) if l < n => Ok(l),
            Some(l) => Err(Error::Data(format!(
                "label {l} outside 0..{n} in {}",
                s.window.origin.record_id
            ))),
            None => Err(Error::Data(format!(
                "evaluation needs labels, {} has none",
                s.window.origin.record_id
            ))),
        })
        .collect::<Result<_>>()?;
    let windows: Vec<&Window> = samples.iter().map(|s| &s.window).collect();
    let predicted = model.predict(&windows)?;
    let confusion = ConfusionMatrix::from_predictions(&truth, &predicted, n)?;
    Ok(UserEvaluation {
        acc: confusion.accuracy()?,
        mf1: confusion.macro_f1()?,
        n_windows: samples.len(),
        confusion,
    })
}
