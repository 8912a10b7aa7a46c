//! Parameter snapshots, masks and sparse difference vectors.
//!
//! Every parameter set is described by a [`Layout`]: tensors sorted by name,
//! each flattened row-major, concatenated into one global index space. The
//! layout's [`Fingerprint`] guards every cross-artifact operation.

mod container;
mod diff;
mod layout;
mod mask;
mod snapshot;

use thiserror::Error;

pub use container::{
    deserialize_checkpoint, deserialize_diff, peek_fingerprint, serialize_checkpoint,
    serialize_diff, Checkpoint, ContainerError, Metadata, SftContainer, CHECKPOINT_MAGIC,
    SFT_MAGIC,
};
pub use diff::{apply_diffs, diff_density, extract_diff, extract_diff_over, SparseDiff};
pub(crate) use diff::{canonical_delta, compose};
pub use layout::{Fingerprint, Layout};
pub use mask::{overlap_percentage, GroupPolicy, GroupTag, Mask, ParameterGroups};
pub use snapshot::ParameterSnapshot;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name:?} has invalid shape {shape:?}")]
    BadShape { name: String, shape: Vec<usize> },
    #[error("tensor {name:?}: expected {expected} values, found {found}")]
    LengthMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("parameter set too large for 32-bit indices: {0}")]
    TooLarge(usize),
    #[error("flat index {index} out of range for {total} parameters")]
    IndexOutOfRange { index: usize, total: usize },
    #[error("indices not strictly ascending at {0}")]
    NonAscending(usize),
    #[error("zero or non-finite delta at index {0}")]
    BadDelta(usize),
    #[error("mask budgets differ: {a} vs {b}")]
    BudgetMismatch { a: usize, b: usize },
    #[error("invalid fingerprint {0:?}")]
    BadFingerprint(String),
    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),
}
