use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ParamError;

/// SHA-256 digest over the ordered `name:shape;` records of a parameter set.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint([u8; 32]);

impl Fingerprint {
    pub fn of<'a, I>(records: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a [usize])>,
    {
        let mut hasher = Sha256::new();
        for (name, shape) in records {
            hasher.update(record(name, shape).as_bytes());
        }
        let mut out = [0u8; 32];
        out.copy_from_slice(&hasher.finalize());
        Fingerprint(out)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, ParamError> {
        let bytes = hex::decode(s).map_err(|_| ParamError::BadFingerprint(s.to_string()))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| ParamError::BadFingerprint(s.to_string()))?;
        Ok(Fingerprint(arr))
    }

    /// First 12 hex digits, enough for error messages.
    pub fn short(&self) -> String {
        self.to_hex()[..12].to_string()
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.short())
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Fingerprint::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

fn record(name: &str, shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("{}:{};", name, dims.join("x"))
}

/// Names, shapes and flat offsets of a parameter set, sorted by name.
///
/// Every tensor is laid out row-major and the tensors are concatenated in
/// name order, so a single `usize` addresses any scalar parameter.
#[derive(Clone, PartialEq, Eq)]
pub struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    total: usize,
    fingerprint: Fingerprint,
}

impl fmt::Debug for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Layout")
            .field("tensors", &self.names.len())
            .field("total", &self.total)
            .field("fingerprint", &self.fingerprint)
            .finish()
    }
}

impl Layout {
    /// Builds a layout, sorting the records lexicographically by name.
    pub fn new(mut records: Vec<(String, Vec<usize>)>) -> Result<Arc<Self>, ParamError> {
        records.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in records.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(ParamError::DuplicateName(pair[0].0.clone()));
            }
        }
        let mut offsets = Vec::with_capacity(records.len());
        let mut total = 0usize;
        for (name, shape) in &records {
            if shape.is_empty() || shape.contains(&0) {
                return Err(ParamError::BadShape {
                    name: name.clone(),
                    shape: shape.clone(),
                });
            }
            offsets.push(total);
            total += shape.iter().product::<usize>();
        }
        if total > u32::MAX as usize {
            return Err(ParamError::TooLarge(total));
        }
        let fingerprint = Fingerprint::of(records.iter().map(|(n, s)| (n.as_str(), s.as_slice())));
        let (names, shapes) = records.into_iter().unzip();
        Ok(Arc::new(Layout {
            names,
            shapes,
            offsets,
            total,
            fingerprint,
        }))
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    /// Total scalar parameter count.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, tensor: usize) -> &str {
        &self.names[tensor]
    }

    pub fn shape(&self, tensor: usize) -> &[usize] {
        &self.shapes[tensor]
    }

    pub fn size(&self, tensor: usize) -> usize {
        self.range(tensor).len()
    }

    /// Flat index range occupied by `tensor`.
    pub fn range(&self, tensor: usize) -> std::ops::Range<usize> {
        let end = self.offsets.get(tensor + 1).copied().unwrap_or(self.total);
        self.offsets[tensor]..end
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    /// Tensor owning the global flat index `flat`.
    pub fn tensor_of(&self, flat: usize) -> usize {
        match self.offsets.binary_search(&flat) {
            Ok(i) => {
                // zero-size tensors are rejected, so offsets are strictly increasing
                i
            }
            Err(i) => i - 1,
        }
    }

    pub fn ensure_same(&self, other: &Layout) -> Result<(), ParamError> {
        if self.fingerprint != other.fingerprint {
            return Err(ParamError::FingerprintMismatch {
                expected: self.fingerprint.to_hex(),
                found: other.fingerprint.to_hex(),
            });
        }
        Ok(())
    }
}
