use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EngineError, LossGrad, Objective, TrainConfig};
use crate::model::{init_head, mlm_corrupt, Batch, ForwardOptions, HeadSpec, TransformerModel};
use crate::numeric::CounterRng;
use crate::param::{Layout, ParameterGroups, ParameterSnapshot};

/// Visits `len` items once per epoch in a seeded order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochSchedule {
    pub len: usize,
    pub seed: u64,
}

impl EpochSchedule {
    pub fn index(&self, step: usize) -> usize {
        let epoch = (step / self.len) as u64;
        let mut order: Vec<usize> = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(CounterRng::new(self.seed).u64(epoch));
        order.shuffle(&mut rng);
        order[step % self.len]
    }
}

fn forward_opts(cfg: &TrainConfig, step: usize) -> ForwardOptions {
    ForwardOptions {
        dropout: cfg.dropout,
        seed: cfg.seed,
        step: step as u64,
    }
}

/// Masked language modelling over a fixed list of plain batches.
///
/// Each step re-corrupts its batch with a seed derived from the step, so
/// two phases with the same seed see identical inputs.
pub struct MlmObjective<'a> {
    model: &'a TransformerModel,
    batches: Vec<Batch>,
    dev: Vec<Batch>,
    mask_fraction: f64,
    schedule: EpochSchedule,
}

impl<'a> MlmObjective<'a> {
    pub fn new(
        model: &'a TransformerModel,
        batches: Vec<Batch>,
        dev: Vec<Batch>,
        mask_fraction: f64,
        seed: u64,
    ) -> Result<Self, EngineError> {
        if batches.is_empty() {
            return Err(EngineError::NoData("empty MLM corpus".into()));
        }
        let vocab = model.spec().vocab_size;
        let dev = dev
            .iter()
            .enumerate()
            .map(|(i, b)| {
                Ok(mlm_corrupt(
                    b,
                    mask_fraction,
                    CounterRng::new(0xdef).u64(i as u64),
                    vocab,
                )?
                .batch)
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        Ok(MlmObjective {
            model,
            schedule: EpochSchedule {
                len: batches.len(),
                seed,
            },
            batches,
            dev,
            mask_fraction,
        })
    }

    /// Mean MLM loss over the fixed corrupted dev batches.
    pub fn dev_loss_of(&self, params: &ParameterSnapshot) -> Result<Option<f64>, EngineError> {
        if self.dev.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for b in &self.dev {
            total += self.model.loss(params, None, b)?;
        }
        Ok(Some(total / self.dev.len() as f64))
    }
}

impl Objective for MlmObjective<'_> {
    fn layout(&self) -> &Arc<Layout> {
        self.model.layout()
    }

    fn groups(&self) -> &ParameterGroups {
        self.model.groups()
    }

    fn init_head(&self, _seed: u64) -> Result<Option<ParameterSnapshot>, EngineError> {
        Ok(None)
    }

    fn loss_grad(
        &self,
        body: &ParameterSnapshot,
        _head: Option<&ParameterSnapshot>,
        step: usize,
        cfg: &TrainConfig,
    ) -> Result<LossGrad, EngineError> {
        let plain = &self.batches[self.schedule.index(step)];
        let seed = CounterRng::new(cfg.seed).u64(step as u64);
        let batch = mlm_corrupt(
            plain,
            self.mask_fraction,
            seed,
            self.model.spec().vocab_size,
        )?
        .batch;
        let out = self
            .model
            .forward_loss(body, None, &batch, &forward_opts(cfg, step))?;
        Ok(LossGrad {
            loss: out.loss,
            body: out.body,
            head: None,
        })
    }

    fn dev_loss(
        &self,
        params: &mut dyn FnMut(Option<usize>) -> Result<ParameterSnapshot, EngineError>,
        _head: Option<&ParameterSnapshot>,
    ) -> Option<Result<f64, EngineError>> {
        if self.dev.is_empty() {
            return None;
        }
        Some(params(None).and_then(|p| self.dev_loss_of(&p).map(|l| l.unwrap_or(f64::NAN))))
    }
}

/// Supervised task training; every batch names the overlay applied while
/// it is trained on (the language SFT of its source language).
pub struct TaskObjective<'a> {
    model: &'a TransformerModel,
    head: HeadSpec,
    batches: Vec<(Batch, Option<usize>)>,
    dev: Vec<(Batch, Option<usize>)>,
    schedule: EpochSchedule,
}

impl<'a> TaskObjective<'a> {
    pub fn new(
        model: &'a TransformerModel,
        head: HeadSpec,
        batches: Vec<(Batch, Option<usize>)>,
        dev: Vec<(Batch, Option<usize>)>,
        seed: u64,
    ) -> Result<Self, EngineError> {
        if batches.is_empty() {
            return Err(EngineError::NoData("empty task dataset".into()));
        }
        Ok(TaskObjective {
            model,
            head,
            schedule: EpochSchedule {
                len: batches.len(),
                seed,
            },
            batches,
            dev,
        })
    }

    pub fn head_spec(&self) -> &HeadSpec {
        &self.head
    }
}

impl Objective for TaskObjective<'_> {
    fn layout(&self) -> &Arc<Layout> {
        self.model.layout()
    }

    fn groups(&self) -> &ParameterGroups {
        self.model.groups()
    }

    fn init_head(&self, seed: u64) -> Result<Option<ParameterSnapshot>, EngineError> {
        Ok(Some(init_head(
            &self.head,
            self.model.spec().hidden_size,
            seed,
        )?))
    }

    fn overlay_at(&self, step: usize) -> Option<usize> {
        self.batches[self.schedule.index(step)].1
    }

    fn loss_grad(
        &self,
        body: &ParameterSnapshot,
        head: Option<&ParameterSnapshot>,
        step: usize,
        cfg: &TrainConfig,
    ) -> Result<LossGrad, EngineError> {
        let head = head.ok_or_else(|| EngineError::Config("task objective needs a head".into()))?;
        let (batch, _) = &self.batches[self.schedule.index(step)];
        let out = self.model.forward_loss(
            body,
            Some((&self.head, head)),
            batch,
            &forward_opts(cfg, step),
        )?;
        Ok(LossGrad {
            loss: out.loss,
            body: out.body,
            head: out.head,
        })
    }

    fn dev_loss(
        &self,
        params: &mut dyn FnMut(Option<usize>) -> Result<ParameterSnapshot, EngineError>,
        head: Option<&ParameterSnapshot>,
    ) -> Option<Result<f64, EngineError>> {
        if self.dev.is_empty() {
            return None;
        }
        let head = head?;
        let mut run = || {
            let mut total = 0.0;
            for (b, ov) in &self.dev {
                let p = params(*ov)?;
                total += self.model.loss(&p, Some((&self.head, head)), b)?;
            }
            Ok(total / self.dev.len() as f64)
        };
        Some(run())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_a_permutation_per_epoch() {
        let s = EpochSchedule { len: 7, seed: 3 };
        for epoch in 0..3 {
            let mut seen: Vec<usize> = (0..7).map(|i| s.index(epoch * 7 + i)).collect();
            seen.sort();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
        let first: Vec<usize> = (0..7).map(|i| s.index(i)).collect();
        let second: Vec<usize> = (7..14).map(|i| s.index(i)).collect();
        assert_ne!(first, second);
    }
}
