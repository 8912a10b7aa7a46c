//! Two-phase lottery-ticket sparse fine-tuning.
//!
//! Training happens in delta space: the trainer holds a frozen base, an
//! optional per-step overlay (another sparse diff) and a dense offset `δ`.
//! The parameters seen by the loss at every step are
//! `round32(base + overlay + δ)`, the same arithmetic as
//! [`apply_diffs`](crate::param::apply_diffs), so a trained model can be
//! rebuilt bitwise from the base and its emitted diffs.

mod mask;
mod objectives;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::param::{GroupPolicy, ParamError};

pub use mask::{select_mask, MaskStrategy};
pub use objectives::{EpochSchedule, MlmObjective, TaskObjective};
pub use optim::{l1_anchor, linear_decay, OptimizerState};
pub use trainer::{
    full_finetune, lt_sft, phase1_full_finetune, phase2_masked_finetune, LossGrad, LtSftOutput,
    Objective, PhaseOutput, TrainContext,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("budget {k} exceeds maskable parameter count {maskable}")]
    BudgetTooLarge { k: usize, maskable: usize },
    #[error("training diverged at step {step} of phase {phase}")]
    Divergence { phase: u8, step: usize },
    #[error("no data: {0}")]
    NoData(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Number of trainable parameters in Phase 2.
///
/// Serialized untagged: integers are counts, reals are fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Count(usize),
    /// Fraction of the maskable parameter count, in `(0, 1]`.
    Fraction(f64),
}

impl Budget {
    pub fn resolve(&self, maskable: usize) -> Result<usize, EngineError> {
        let k = match *self {
            Budget::Count(k) => k,
            Budget::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(EngineError::Config(format!(
                        "budget fraction {} outside (0, 1]",
                        f
                    )));
                }
                ((f * maskable as f64).round() as usize).max(1)
            }
        };
        if k == 0 {
            return Err(EngineError::Config("budget must be positive".into()));
        }
        if k > maskable {
            return Err(EngineError::BudgetTooLarge { k, maskable });
        }
        Ok(k)
    }
}

impl std::str::FromStr for Budget {
    type Err = EngineError;

    /// `"1500"` is a count; `"0.05"` or `"5%"` a fraction.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || EngineError::Config(format!("cannot parse budget {:?}", s));
        if let Some(p) = s.strip_suffix('%') {
            let v: f64 = p.parse().map_err(|_| bad())?;
            return Ok(Budget::Fraction(v / 100.0));
        }
        if let Ok(k) = s.parse::<usize>() {
            return Ok(Budget::Count(k));
        }
        s.parse::<f64>().map(Budget::Fraction).map_err(|_| bad())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointSelection {
    Final,
    /// Dev loss every `every` steps and at the end; lowest wins, earliest on ties.
    BestOnDev {
        every: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub budget: Budget,
    pub lambda: f64,
    pub learning_rate: f64,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub checkpoint: CheckpointSelection,
    pub dropout: f64,
    pub policy: GroupPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            budget: Budget::Fraction(0.05),
            lambda: 0.0,
            learning_rate: 5e-4,
            phase1_steps: 200,
            phase2_steps: 200,
            batch_size: 16,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            checkpoint: CheckpointSelection::Final,
            dropout: 0.1,
            policy: GroupPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let fail = |m: String| Err(EngineError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || o.epsilon <= 0.0
            || o.weight_decay < 0.0
        {
            return fail("invalid optimizer hyper-parameters".into());
        }
        if let CheckpointSelection::BestOnDev { every: 0 } = self.checkpoint {
            return fail("best-on-dev interval must be positive".into());
        }
        Ok(())
    }
}
