//! Sparse fine-tuning with lottery-ticket masks, and cross-lingual transfer
//! by composing language and task sparse diffs on a pretrained base.
//!
//! - [`numeric`]: tensors, a reverse-mode tape and gradient checking.
//! - [`param`]: layouts, snapshots, masks, sparse diffs and containers.
//! - [`model`]: a small transformer encoder with classification heads.
//! - [`engine`]: mask selection and two-phase training.
//! - [`synth`]: synthetic languages, corpora and task data.
//! - [`transfer`]: language and task SFTs, composition and evaluation.
//! - [`analysis`]: mask overlap and density sweeps.

pub mod analysis;
pub mod engine;
pub mod model;
pub mod numeric;
pub mod param;
pub mod synth;
pub mod transfer;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sparse-diffs.md")]
    mod sparse_diffs {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/transfer.md")]
    mod transfer {}
    #[doc = include_str!("../../../book/src/containers.md")]
    mod containers {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
