use std::sync::Arc;

use super::{Fingerprint, Layout, Mask, ParamError, ParameterSnapshot};

/// A sparse difference vector `φ` over a parameter layout.
///
/// Entries are `(flat index, delta)` pairs with strictly ascending indices and
/// no zero deltas. Flat indices follow the row-major, name-ordered layout of
/// [`Layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDiff {
    layout: Arc<Layout>,
    indices: Vec<u32>,
    deltas: Vec<f32>,
}

impl SparseDiff {
    pub fn empty(layout: Arc<Layout>) -> Self {
        SparseDiff {
            layout,
            indices: Vec::new(),
            deltas: Vec::new(),
        }
    }

    /// Validates and wraps already-sorted entries.
    pub fn from_entries(
        layout: Arc<Layout>,
        indices: Vec<u32>,
        deltas: Vec<f32>,
    ) -> Result<Self, ParamError> {
        if indices.len() != deltas.len() {
            return Err(ParamError::LengthMismatch {
                name: "<diff>".into(),
                expected: indices.len(),
                found: deltas.len(),
            });
        }
        for pair in indices.windows(2) {
            if pair[0] >= pair[1] {
                return Err(ParamError::NonAscending(pair[1] as usize));
            }
        }
        if let Some(&last) = indices.last() {
            if last as usize >= layout.total() {
                return Err(ParamError::IndexOutOfRange {
                    index: last as usize,
                    total: layout.total(),
                });
            }
        }
        if let Some(pos) = deltas.iter().position(|d| *d == 0.0 || !d.is_finite()) {
            return Err(ParamError::BadDelta(indices[pos] as usize));
        }
        Ok(SparseDiff {
            layout,
            indices,
            deltas,
        })
    }

    /// Builds a diff from a dense delta vector, dropping exact zeros.
    pub fn from_dense(layout: Arc<Layout>, dense: &[f32]) -> Result<Self, ParamError> {
        if dense.len() != layout.total() {
            return Err(ParamError::LengthMismatch {
                name: "<dense>".into(),
                expected: layout.total(),
                found: dense.len(),
            });
        }
        let (indices, deltas) = dense
            .iter()
            .enumerate()
            .filter(|(_, d)| **d != 0.0)
            .map(|(i, d)| (i as u32, *d))
            .unzip();
        SparseDiff::from_entries(layout, indices, deltas)
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.layout.fingerprint()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn deltas(&self) -> &[f32] {
        &self.deltas
    }

    /// Number of stored deltas.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.indices
            .iter()
            .zip(&self.deltas)
            .map(|(&i, &d)| (i as usize, d))
    }

    /// Entries belonging to one tensor, as tensor-local flat indices.
    pub fn tensor_entries(&self, tensor: usize) -> (Vec<u32>, Vec<f32>) {
        let range = self.layout.range(tensor);
        let lo = self
            .indices
            .partition_point(|&i| (i as usize) < range.start);
        let hi = self.indices.partition_point(|&i| (i as usize) < range.end);
        let local = self.indices[lo..hi]
            .iter()
            .map(|&i| i - range.start as u32)
            .collect();
        (local, self.deltas[lo..hi].to_vec())
    }

    /// Dense `f32` copy of the deltas.
    pub fn to_dense(&self) -> Vec<f32> {
        let mut dense = vec![0.0; self.layout.total()];
        for (i, d) in self.iter() {
            dense[i] = d;
        }
        dense
    }

    /// The support as a mask.
    pub fn support(&self) -> Mask {
        let mut mask = Mask::empty(self.layout.clone());
        for &i in &self.indices {
            mask.set(i as usize, true);
        }
        mask
    }

    pub fn density(&self) -> f64 {
        diff_density(self, self.layout.total())
    }

    pub fn bitwise_eq(&self, other: &SparseDiff) -> bool {
        self.fingerprint() == other.fingerprint()
            && self.indices == other.indices
            && self
                .deltas
                .iter()
                .zip(&other.deltas)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Stored-delta count over `total_params`.
pub fn diff_density(diff: &SparseDiff, total_params: usize) -> f64 {
    if total_params == 0 {
        return 0.0;
    }
    diff.nnz() as f64 / total_params as f64
}

/// `φ = after − before`, with exact zeros dropped.
pub fn extract_diff(
    after: &ParameterSnapshot,
    before: &ParameterSnapshot,
) -> Result<SparseDiff, ParamError> {
    extract_diff_over(after, before, &[])
}

/// `φ = after − (before + Σ overlays)`.
///
/// Each delta is the `f32` nearest to the exact difference, nudged by a few
/// ulps if needed so that [`apply_diffs`] with the same overlays reproduces
/// `after` bitwise. A coordinate whose anchor already rounds to `after` gets
/// no entry.
pub fn extract_diff_over(
    after: &ParameterSnapshot,
    before: &ParameterSnapshot,
    overlays: &[&SparseDiff],
) -> Result<SparseDiff, ParamError> {
    before.layout().ensure_same(after.layout())?;
    for ov in overlays {
        before.layout().ensure_same(ov.layout())?;
    }
    let entries = grouped(overlays);
    let mut runs = entries.chunk_by(|a, b| a.0 == b.0).peekable();
    let mut parts = Vec::new();
    let mut indices = Vec::new();
    let mut deltas = Vec::new();
    for (i, (&b, &y)) in before.values().iter().zip(after.values()).enumerate() {
        parts.clear();
        if let Some(run) = runs.next_if(|r| r[0].0 as usize == i) {
            parts.extend(run.iter().map(|e| e.1));
        }
        let d = canonical_delta(y, b, &parts);
        if d != 0.0 {
            indices.push(i as u32);
            deltas.push(d);
        }
    }
    SparseDiff::from_entries(before.layout().clone(), indices, deltas)
}

/// `base + Σ diffs`.
///
/// Per coordinate the deltas are added to the base in `f64` in ascending
/// order and the sum is rounded once, so the result does not depend on the
/// order of `diffs`.
pub fn apply_diffs(
    base: &ParameterSnapshot,
    diffs: &[&SparseDiff],
) -> Result<ParameterSnapshot, ParamError> {
    for d in diffs {
        base.layout().ensure_same(d.layout())?;
    }
    if diffs.is_empty() {
        return Ok(base.clone());
    }
    let mut values = base.values().to_vec();
    for run in grouped(diffs).chunk_by(|a, b| a.0 == b.0) {
        let i = run[0].0 as usize;
        values[i] = fold_sorted(values[i], run.iter().map(|e| e.1));
    }
    ParameterSnapshot::from_flat(base.layout().clone(), values)
}

/// Every entry of `diffs`, ordered by index and then by value.
fn grouped(diffs: &[&SparseDiff]) -> Vec<(u32, f32)> {
    let mut all: Vec<(u32, f32)> = diffs
        .iter()
        .flat_map(|d| d.indices.iter().copied().zip(d.deltas.iter().copied()))
        .collect();
    all.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    all
}

fn fold_sorted(base: f32, parts: impl Iterator<Item = f32>) -> f32 {
    parts.fold(base as f64, |acc, p| acc + p as f64) as f32
}

/// `round32(base + Σ parts)`: the parts are added to `base` in `f64` in
/// ascending order and the sum is rounded once.
pub(crate) fn compose(base: f32, parts: &mut [f32]) -> f32 {
    parts.sort_unstable_by(f32::total_cmp);
    fold_sorted(base, parts.iter().copied())
}

/// Smallest-effort `f32` delta `d` with `compose(base, parts ∪ {d}) == after`.
///
/// Returns `0.0` when `parts` alone already give `after` (signed zeros
/// compare equal). When no `f32` witness exists (a coordinate that crosses
/// far through zero), the nearest delta is kept.
pub(crate) fn canonical_delta(after: f32, base: f32, parts: &[f32]) -> f32 {
    let mut buf = Vec::with_capacity(parts.len() + 1);
    let mut with = |d: Option<f32>| {
        buf.clear();
        buf.extend_from_slice(parts);
        buf.extend(d);
        compose(base, &mut buf)
    };
    if with(None) == after {
        return 0.0;
    }
    let mut hits = |d: f32| d != 0.0 && with(Some(d)).to_bits() == after.to_bits();
    let anchor = parts.iter().fold(base as f64, |acc, &p| acc + p as f64);
    let d = (after as f64 - anchor) as f32;
    if hits(d) {
        return d;
    }
    let (mut up, mut down) = (d, d);
    for _ in 0..4 {
        up = up.next_up();
        down = down.next_down();
        if hits(up) {
            return up;
        }
        if hits(down) {
            return down;
        }
    }
    d
}
