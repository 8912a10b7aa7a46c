use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::param::ParameterSnapshot;

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Single linear layer applied to every token.
    TokenClassification,
    /// Two-layer classifier over the `[CLS]` position.
    SequenceClassification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub classes: usize,
}

impl HeadSpec {
    pub fn tokens(classes: usize) -> Self {
        HeadSpec {
            kind: HeadKind::TokenClassification,
            classes,
        }
    }

    pub fn sequence(classes: usize) -> Self {
        HeadSpec {
            kind: HeadKind::SequenceClassification,
            classes,
        }
    }

    pub fn shapes(&self, hidden: usize) -> Vec<(String, Vec<usize>)> {
        let c = self.classes;
        let mut out = vec![
            ("head.classifier.weight".to_string(), vec![hidden, c]),
            ("head.classifier.bias".to_string(), vec![c]),
        ];
        if self.kind == HeadKind::SequenceClassification {
            out.push(("head.dense.weight".to_string(), vec![hidden, hidden]));
            out.push(("head.dense.bias".to_string(), vec![hidden]));
        }
        out
    }
}

/// Fresh head parameters: weights `N(0, 0.02²)`, zero biases.
///
/// The same seed always yields bitwise-identical parameters, so both
/// training phases can start the head from the same initialization.
pub fn init_head(
    spec: &HeadSpec,
    hidden: usize,
    seed: u64,
) -> Result<ParameterSnapshot, ModelError> {
    if spec.classes < 2 {
        return Err(ModelError::Spec(format!(
            "a head needs at least 2 classes, got {}",
            spec.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut shapes = spec.shapes(hidden);
    shapes.sort_by(|a, b| a.0.cmp(&b.0));
    let entries = shapes
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let values = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            (name, shape, values)
        })
        .collect();
    Ok(ParameterSnapshot::new(entries)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_head() {
        let spec = HeadSpec::sequence(3);
        let a = init_head(&spec, 16, 5).unwrap();
        let b = init_head(&spec, 16, 5).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = init_head(&spec, 16, 6).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn weights_centred_at_zero() {
        let head = init_head(&HeadSpec::tokens(8), 64, 11).unwrap();
        let w = head.tensor("head.classifier.weight").unwrap();
        let n = w.len() as f64;
        let mean = w.iter().map(|&x| x as f64).sum::<f64>() / n;
        assert!(mean.abs() <= 3.0 * INIT_STD / n.sqrt(), "mean {}", mean);
        assert!(head
            .tensor("head.classifier.bias")
            .unwrap()
            .iter()
            .all(|&b| b == 0.0));
    }

    #[test]
    fn rejects_single_class() {
        assert!(init_head(&HeadSpec::tokens(1), 8, 0).is_err());
    }
}
