use serde::{Deserialize, Serialize};

use super::TransferError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    /// Micro F1 over maximal runs of one label; runs of `outside` are not spans.
    SpanF1 {
        outside: Option<u32>,
    },
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::SpanF1 { .. } => "span-f1",
        }
    }
}

/// Fraction of equal positions over all sequences.
pub fn accuracy(gold: &[Vec<u32>], pred: &[Vec<u32>]) -> Result<f64, TransferError> {
    check_aligned(gold, pred)?;
    let total: usize = gold.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(TransferError::Config("no labels to score".into()));
    }
    let hits: usize = gold
        .iter()
        .zip(pred)
        .map(|(g, p)| g.iter().zip(p).filter(|(a, b)| a == b).count())
        .sum();
    Ok(hits as f64 / total as f64)
}

/// `(start, end_exclusive, label)` of every maximal run not labelled `outside`.
pub fn spans(labels: &[u32], outside: Option<u32>) -> Vec<(usize, usize, u32)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let mut j = i + 1;
        while j < labels.len() && labels[j] == labels[i] {
            j += 1;
        }
        if Some(labels[i]) != outside {
            out.push((i, j, labels[i]));
        }
        i = j;
    }
    out
}

/// Micro-averaged exact-match span F1. Both sides empty scores 1.
pub fn span_f1(
    gold: &[Vec<u32>],
    pred: &[Vec<u32>],
    outside: Option<u32>,
) -> Result<f64, TransferError> {
    check_aligned(gold, pred)?;
    let (mut tp, mut n_gold, mut n_pred) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        let gs = spans(g, outside);
        let ps = spans(p, outside);
        n_gold += gs.len();
        n_pred += ps.len();
        tp += ps.iter().filter(|s| gs.contains(s)).count();
    }
    if n_gold == 0 && n_pred == 0 {
        return Ok(1.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / n_pred as f64;
    let recall = tp as f64 / n_gold as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

fn check_aligned(gold: &[Vec<u32>], pred: &[Vec<u32>]) -> Result<(), TransferError> {
    if gold.len() != pred.len() || gold.iter().zip(pred).any(|(g, p)| g.len() != p.len()) {
        return Err(TransferError::Config(
            "predictions not aligned with gold labels".into(),
        ));
    }
    Ok(())
}
