use std::fmt::Write as _;

use super::AnalysisError;
use crate::param::{overlap_percentage, Mask, ParamError};

/// Symmetric matrix of pairwise overlap percentages, diagonal 100.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapMatrix {
    pub tags: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl OverlapMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a][b]
    }

    /// Header row of tags, then one row per tag.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("language");
        for t in &self.tags {
            write!(s, "\t{t}").expect("write to string");
        }
        s.push('\n');
        for (t, row) in self.tags.iter().zip(&self.values) {
            s.push_str(t);
            for v in row {
                write!(s, "\t{v:.4}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }

    /// Mean of the off-diagonal entries, `None` for fewer than two tags.
    pub fn off_diagonal_mean(&self) -> Option<f64> {
        let n = self.tags.len();
        if n < 2 {
            return None;
        }
        let sum: f64 = (0..n)
            .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
            .map(|(a, b)| self.values[a][b])
            .sum();
        Some(sum / (n * (n - 1)) as f64)
    }
}

/// Overlap percentage two uniform random `k`-subsets of `n` share on average.
pub fn expected_random_overlap(k: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    100.0 * k as f64 / n as f64
}

/// Pairwise overlap of equal-budget masks on one layout.
pub fn overlap_matrix(masks: &[(&str, &Mask)]) -> Result<OverlapMatrix, AnalysisError> {
    let Some((_, first)) = masks.first() else {
        return Err(AnalysisError::Config(
            "overlap needs at least one mask".into(),
        ));
    };
    for (_, m) in masks {
        first.layout().ensure_same(m.layout())?;
        if m.count() != first.count() {
            return Err(ParamError::BudgetMismatch {
                a: first.count(),
                b: m.count(),
            }
            .into());
        }
    }
    let n = masks.len();
    let mut values = vec![vec![100.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let v = overlap_percentage(masks[a].1, masks[b].1)?;
            values[a][b] = v;
            values[b][a] = v;
        }
    }
    Ok(OverlapMatrix {
        tags: masks.iter().map(|(t, _)| t.to_string()).collect(),
        values,
    })
}
