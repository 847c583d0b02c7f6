//! Targets and per-sample losses shared by both models.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows_values, AutodiffError, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// Supervision for one dataset: class indices or real values.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Arc<Vec<usize>>, n_classes: usize },
    Real(Arc<Tensor>),
}

impl Targets {
    pub fn classes(labels: Vec<usize>, n_classes: usize) -> Self {
        Targets::Classes {
            labels: Arc::new(labels),
            n_classes,
        }
    }

    pub fn real(values: Vec<f64>) -> Self {
        Targets::Real(Arc::new(Tensor::vector(values)))
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Real(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> LossKind {
        match self {
            Targets::Classes { .. } => LossKind::CrossEntropy,
            Targets::Real(_) => LossKind::Mse,
        }
    }

    /// Width of a model output for these targets.
    pub fn output_dim(&self) -> usize {
        match self {
            Targets::Classes { n_classes, .. } => *n_classes,
            Targets::Real(_) => 1,
        }
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: Arc::new(rows.iter().map(|&r| labels[r]).collect()),
                n_classes: *n_classes,
            },
            Targets::Real(t) => Targets::Real(Arc::new(t.select_rows(rows))),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Real(_) => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match self {
            Targets::Classes { .. } => None,
            Targets::Real(t) => Some(t.data()),
        }
    }
}

/// Per-sample loss `[n]` of model outputs against the targets.
pub fn per_sample_loss(tape: &mut Tape, out: Var, targets: &Targets) -> Result<Var, AutodiffError> {
    match targets {
        Targets::Classes { labels, .. } => tape.cross_entropy(out, Arc::clone(labels)),
        Targets::Real(t) => tape.mse(out, Arc::clone(t)),
    }
}

/// Untracked per-sample loss values.
pub fn per_sample_loss_values(out: &Tensor, targets: &Targets) -> Result<Vec<f64>, AutodiffError> {
    let mut tape = Tape::new();
    let v = tape.constant(out.clone());
    let l = per_sample_loss(&mut tape, v, targets)?;
    Ok(tape.value(l).data().to_vec())
}

/// Fraction of rows whose argmax output matches the label (lowest index on
/// ties).
pub fn accuracy(out: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(out.row(i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn mean_squared_error(out: &Tensor, values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let s: f64 = out.data().iter().zip(values).map(|(p, y)| (p - y) * (p - y)).sum();
    s / values.len() as f64
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn class_probabilities(logits: &Tensor) -> Result<Tensor, AutodiffError> {
    softmax_rows_values(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let out = Tensor::matrix(3, 2, vec![0.1, 0.9, 0.8, 0.2, 0.5, 0.5]).unwrap();
        assert_eq!(accuracy(&out, &[1, 0, 1]), 2.0 / 3.0);
    }

    #[test]
    fn select_keeps_class_count() {
        let t = Targets::classes(vec![0, 1, 2, 1], 3);
        let s = t.select(&[3, 0]);
        assert_eq!(s.labels().unwrap(), &[1, 0]);
        assert_eq!(s.output_dim(), 3);
    }
}
