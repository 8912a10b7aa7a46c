use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelError, FIRST_REGULAR, MASK, PAD};

/// Supervision attached to a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    None,
    /// One optional label per position, aligned with `ids`.
    Tokens(Vec<Vec<Option<u32>>>),
    /// One label per sequence.
    Sequence(Vec<u32>),
}

/// Padded token ids with an attention mask, labels and a language tag.
///
/// Attention is a prefix: real tokens first, then padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub attention: Vec<Vec<bool>>,
    pub labels: Labels,
    pub language: Option<String>,
}

impl Batch {
    /// Pads `sequences` to a common length.
    pub fn from_sequences(
        sequences: Vec<Vec<u32>>,
        labels: Labels,
        language: Option<String>,
    ) -> Self {
        let width = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let attention = sequences
            .iter()
            .map(|s| (0..width).map(|i| i < s.len()).collect())
            .collect();
        let labels = match labels {
            Labels::Tokens(rows) => Labels::Tokens(
                rows.into_iter()
                    .map(|mut r| {
                        r.resize(width, None);
                        r
                    })
                    .collect(),
            ),
            other => other,
        };
        let ids = sequences
            .into_iter()
            .map(|mut s| {
                s.resize(width, PAD);
                s
            })
            .collect();
        Batch {
            ids,
            attention,
            labels,
            language,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Real (unpadded) length of sequence `b`.
    pub fn seq_len(&self, b: usize) -> usize {
        self.attention[b].iter().take_while(|a| **a).count()
    }

    pub fn validate(&self, vocab_size: usize, max_seq_len: usize) -> Result<(), ModelError> {
        if self.ids.is_empty() {
            return Err(ModelError::Batch("empty batch".into()));
        }
        if self.attention.len() != self.ids.len() {
            return Err(ModelError::Batch(
                "attention rows differ from id rows".into(),
            ));
        }
        for (b, (row, att)) in self.ids.iter().zip(&self.attention).enumerate() {
            if row.len() != att.len() {
                return Err(ModelError::Batch(format!(
                    "row {} attention width differs",
                    b
                )));
            }
            let len = self.seq_len(b);
            if len == 0 || att[len..].iter().any(|a| *a) {
                return Err(ModelError::Batch(format!(
                    "row {} attention is not a non-empty prefix",
                    b
                )));
            }
            if len > max_seq_len {
                return Err(ModelError::Batch(format!(
                    "row {} length {} exceeds {}",
                    b, len, max_seq_len
                )));
            }
            if let Some(bad) = row[..len].iter().find(|&&id| id as usize >= vocab_size) {
                return Err(ModelError::Batch(format!(
                    "token id {} outside vocabulary {}",
                    bad, vocab_size
                )));
            }
        }
        match &self.labels {
            Labels::Tokens(rows) => {
                if rows.len() != self.ids.len()
                    || rows.iter().zip(&self.ids).any(|(l, r)| l.len() != r.len())
                {
                    return Err(ModelError::Batch(
                        "token labels not aligned with ids".into(),
                    ));
                }
            }
            Labels::Sequence(labels) => {
                if labels.len() != self.ids.len() {
                    return Err(ModelError::Batch(
                        "one sequence label per row required".into(),
                    ));
                }
            }
            Labels::None => {}
        }
        Ok(())
    }
}

/// A corrupted MLM batch; labels hold the original ids at selected positions.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmBatch {
    pub batch: Batch,
    /// `(row, position)` of every selected token.
    pub targets: Vec<(usize, usize)>,
}

/// Selects each regular token with probability `mask_fraction`; of those,
/// 80% become `[MASK]`, 10% a random regular token, 10% stay unchanged.
pub fn mlm_corrupt(
    batch: &Batch,
    mask_fraction: f64,
    seed: u64,
    vocab_size: usize,
) -> Result<MlmBatch, ModelError> {
    if !(mask_fraction > 0.0 && mask_fraction < 1.0) {
        return Err(ModelError::Batch(format!(
            "mask fraction {} outside (0, 1)",
            mask_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = batch.ids.clone();
    let mut labels = vec![vec![None; batch.ids.first().map_or(0, Vec::len)]; batch.len()];
    let mut targets = Vec::new();
    for b in 0..batch.len() {
        for p in 0..batch.seq_len(b) {
            let id = batch.ids[b][p];
            if id < FIRST_REGULAR {
                continue;
            }
            if !rng.random_bool(mask_fraction) {
                continue;
            }
            targets.push((b, p));
            labels[b][p] = Some(id);
            let r: f64 = rng.random();
            if r < 0.8 {
                ids[b][p] = MASK;
            } else if r < 0.9 {
                ids[b][p] = rng.random_range(FIRST_REGULAR..vocab_size as u32);
            }
        }
    }
    Ok(MlmBatch {
        batch: Batch {
            ids,
            attention: batch.attention.clone(),
            labels: Labels::Tokens(labels),
            language: batch.language.clone(),
        },
        targets,
    })
}
