use std::sync::Arc;

use super::{Fingerprint, Layout, ParamError};

/// An immutable, name-ordered collection of dense `f32` parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSnapshot {
    layout: Arc<Layout>,
    values: Vec<f32>,
}

impl ParameterSnapshot {
    /// Builds a snapshot from `(name, shape, values)` triples in any order.
    pub fn new(entries: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<Self, ParamError> {
        let mut entries = entries;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, shape, values) in &entries {
            let expected: usize = shape.iter().product();
            if values.len() != expected {
                return Err(ParamError::LengthMismatch {
                    name: name.clone(),
                    expected,
                    found: values.len(),
                });
            }
        }
        let layout = Layout::new(
            entries
                .iter()
                .map(|(n, s, _)| (n.clone(), s.clone()))
                .collect(),
        )?;
        let values = entries.into_iter().flat_map(|(_, _, v)| v).collect();
        Ok(ParameterSnapshot { layout, values })
    }

    /// Wraps flat values laid out according to `layout`.
    pub fn from_flat(layout: Arc<Layout>, values: Vec<f32>) -> Result<Self, ParamError> {
        if values.len() != layout.total() {
            return Err(ParamError::LengthMismatch {
                name: "<flat>".into(),
                expected: layout.total(),
                found: values.len(),
            });
        }
        Ok(ParameterSnapshot { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.total()];
        ParameterSnapshot { layout, values }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.layout.fingerprint()
    }

    /// Total scalar parameter count `N`.
    pub fn total(&self) -> usize {
        self.layout.total()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let idx = self.layout.index_of(name)?;
        Some(&self.values[self.layout.range(idx)])
    }

    pub fn tensor_at(&self, idx: usize) -> &[f32] {
        &self.values[self.layout.range(idx)]
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.layout.index_of(name).map(|i| self.layout.shape(i))
    }

    /// Iterates `(name, shape, values)` in layout order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        (0..self.layout.len()).map(move |i| {
            (
                self.layout.name(i),
                self.layout.shape(i),
                &self.values[self.layout.range(i)],
            )
        })
    }

    pub fn ensure_matches(&self, fingerprint: Fingerprint) -> Result<(), ParamError> {
        if self.fingerprint() != fingerprint {
            return Err(ParamError::FingerprintMismatch {
                expected: self.fingerprint().to_hex(),
                found: fingerprint.to_hex(),
            });
        }
        Ok(())
    }

    /// Bitwise equality of values, treating `-0.0` and `0.0` as different.
    pub fn bitwise_eq(&self, other: &ParameterSnapshot) -> bool {
        self.fingerprint() == other.fingerprint()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
