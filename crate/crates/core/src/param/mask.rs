use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Fingerprint, Layout, ParamError, SparseDiff};

/// Binary indicator `μ` aligned with a parameter layout.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    layout: Arc<Layout>,
    words: Vec<u64>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mask")
            .field("fingerprint", &self.layout.fingerprint())
            .field("popcount", &self.count())
            .finish()
    }
}

impl Mask {
    pub fn empty(layout: Arc<Layout>) -> Self {
        let words = vec![0; layout.total().div_ceil(64)];
        Mask { layout, words }
    }

    pub fn full(layout: Arc<Layout>) -> Self {
        let mut mask = Mask::empty(layout);
        for i in 0..mask.len() {
            mask.set(i, true);
        }
        mask
    }

    pub fn from_indices(
        layout: Arc<Layout>,
        indices: impl IntoIterator<Item = usize>,
    ) -> Result<Self, ParamError> {
        let mut mask = Mask::empty(layout);
        for i in indices {
            if i >= mask.len() {
                return Err(ParamError::IndexOutOfRange {
                    index: i,
                    total: mask.len(),
                });
            }
            mask.set(i, true);
        }
        Ok(mask)
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.layout.fingerprint()
    }

    pub fn len(&self) -> usize {
        self.layout.total()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, on: bool) {
        let bit = 1u64 << (i % 64);
        if on {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    /// Popcount.
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let tz = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(wi * 64 + tz)
            })
        })
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            layout: self.layout.clone(),
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(a, b)| a & b)
                .collect(),
        }
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset(&self, other: &Mask) -> bool {
        self.words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0)
    }

    /// The mask as a diff of unit deltas, for storage in an SFT container.
    pub fn to_unit_diff(&self) -> SparseDiff {
        let indices: Vec<u32> = self.ones().map(|i| i as u32).collect();
        let deltas = vec![1.0; indices.len()];
        SparseDiff::from_entries(self.layout.clone(), indices, deltas)
            .expect("mask bits are ascending and in range")
    }
}

/// `100 · |a ∩ b| / K` for two masks of equal budget `K`.
pub fn overlap_percentage(a: &Mask, b: &Mask) -> Result<f64, ParamError> {
    a.layout.ensure_same(&b.layout)?;
    let (ka, kb) = (a.count(), b.count());
    if ka != kb {
        return Err(ParamError::BudgetMismatch { a: ka, b: kb });
    }
    if ka == 0 {
        return Err(ParamError::BudgetMismatch { a: 0, b: 0 });
    }
    Ok(100.0 * a.intersection_count(b) as f64 / ka as f64)
}

/// The single functional group every parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupTag {
    InputEmbedding,
    OutputEmbedding,
    LayerNorm,
    Bias,
    Attention,
    Ffn,
    Head,
}

impl GroupTag {
    pub const ALL: [GroupTag; 7] = [
        GroupTag::InputEmbedding,
        GroupTag::OutputEmbedding,
        GroupTag::LayerNorm,
        GroupTag::Bias,
        GroupTag::Attention,
        GroupTag::Ffn,
        GroupTag::Head,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            GroupTag::InputEmbedding => "input-embedding",
            GroupTag::OutputEmbedding => "output-embedding",
            GroupTag::LayerNorm => "layer-norm",
            GroupTag::Bias => "bias",
            GroupTag::Attention => "attention",
            GroupTag::Ffn => "ffn",
            GroupTag::Head => "head",
        }
    }
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupTag {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GroupTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ParamError::UnknownGroup(s.to_string()))
    }
}

/// Per-tensor group tags aligned with a layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterGroups {
    layout: Arc<Layout>,
    tags: Vec<GroupTag>,
}

impl ParameterGroups {
    pub fn new(layout: Arc<Layout>, tags: Vec<GroupTag>) -> Result<Self, ParamError> {
        if tags.len() != layout.len() {
            return Err(ParamError::LengthMismatch {
                name: "<groups>".into(),
                expected: layout.len(),
                found: tags.len(),
            });
        }
        Ok(ParameterGroups { layout, tags })
    }

    /// Tags each tensor with `tag_of(name)`.
    pub fn from_fn(layout: Arc<Layout>, tag_of: impl Fn(&str) -> GroupTag) -> Self {
        let tags = layout.names().iter().map(|n| tag_of(n)).collect();
        ParameterGroups { layout, tags }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn tag(&self, tensor: usize) -> GroupTag {
        self.tags[tensor]
    }

    /// Scalar parameter count per tag.
    pub fn counts(&self) -> Vec<(GroupTag, usize)> {
        GroupTag::ALL
            .into_iter()
            .map(|t| {
                let n = (0..self.layout.len())
                    .filter(|&i| self.tags[i] == t)
                    .map(|i| self.layout.size(i))
                    .sum();
                (t, n)
            })
            .collect()
    }

    /// Every parameter carrying one of `tags`.
    pub fn mask_of(&self, tags: &[GroupTag]) -> Mask {
        let mut mask = Mask::empty(self.layout.clone());
        for t in 0..self.layout.len() {
            if tags.contains(&self.tags[t]) {
                for i in self.layout.range(t) {
                    mask.set(i, true);
                }
            }
        }
        mask
    }
}

/// Which parameter groups are frozen during sparse fine-tuning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupPolicy {
    pub excluded: BTreeSet<GroupTag>,
}

impl Default for GroupPolicy {
    /// Output embedding and layer norms frozen.
    fn default() -> Self {
        GroupPolicy {
            excluded: [GroupTag::OutputEmbedding, GroupTag::LayerNorm]
                .into_iter()
                .collect(),
        }
    }
}

impl GroupPolicy {
    pub fn none() -> Self {
        GroupPolicy {
            excluded: BTreeSet::new(),
        }
    }

    pub fn excluding(tags: impl IntoIterator<Item = GroupTag>) -> Self {
        GroupPolicy {
            excluded: tags.into_iter().collect(),
        }
    }

    pub fn is_maskable(&self, tag: GroupTag) -> bool {
        tag != GroupTag::Head && !self.excluded.contains(&tag)
    }

    /// All parameters that may appear in a mask under this policy.
    pub fn maskable(&self, groups: &ParameterGroups) -> Mask {
        let tags: Vec<GroupTag> = GroupTag::ALL
            .into_iter()
            .filter(|t| self.is_maskable(*t))
            .collect();
        groups.mask_of(&tags)
    }
}
