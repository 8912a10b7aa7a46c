use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::param::{GroupPolicy, GroupTag, Mask, ParameterGroups, ParameterSnapshot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    /// Top-K by `|θ1 − θ0|`.
    LotteryTicket,
    /// K coordinates uniformly without replacement.
    RandomK,
    /// Every bias parameter; K is ignored.
    BiasOnly,
}

impl MaskStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskStrategy::LotteryTicket => "lt",
            MaskStrategy::RandomK => "rand",
            MaskStrategy::BiasOnly => "bitfit",
        }
    }

    /// Whether the mask depends on a Phase-1 run.
    pub fn needs_phase1(&self) -> bool {
        matches!(self, MaskStrategy::LotteryTicket)
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lt" | "lottery-ticket" => Ok(MaskStrategy::LotteryTicket),
            "rand" | "random-k" => Ok(MaskStrategy::RandomK),
            "bitfit" | "bias-only" => Ok(MaskStrategy::BiasOnly),
            other => Err(EngineError::Config(format!("unknown strategy {:?}", other))),
        }
    }
}

/// Chooses the Phase-2 trainable set.
///
/// `theta1` is only read by the lottery-ticket strategy; `seed` only by
/// random-k.
pub fn select_mask(
    theta0: &ParameterSnapshot,
    theta1: &ParameterSnapshot,
    groups: &ParameterGroups,
    policy: &GroupPolicy,
    strategy: MaskStrategy,
    k: usize,
    seed: u64,
) -> Result<Mask, EngineError> {
    theta0.layout().ensure_same(theta1.layout())?;
    theta0.layout().ensure_same(groups.layout())?;
    let maskable = policy.maskable(groups);
    let layout = theta0.layout().clone();
    match strategy {
        MaskStrategy::BiasOnly => Ok(groups.mask_of(&[GroupTag::Bias]).and(&maskable)),
        MaskStrategy::LotteryTicket => {
            check_budget(k, maskable.count())?;
            let a = theta0.values();
            let b = theta1.values();
            let mut order: Vec<(f64, usize)> = maskable
                .ones()
                .map(|i| ((b[i] as f64 - a[i] as f64).abs(), i))
                .collect();
            let key = |x: &(f64, usize), y: &(f64, usize)| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1));
            if k < order.len() {
                order.select_nth_unstable_by(k - 1, key);
                order.truncate(k);
            }
            Ok(Mask::from_indices(
                layout,
                order.into_iter().map(|(_, i)| i),
            )?)
        }
        MaskStrategy::RandomK => {
            check_budget(k, maskable.count())?;
            let pool: Vec<usize> = maskable.ones().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picked = rand::seq::index::sample(&mut rng, pool.len(), k);
            Ok(Mask::from_indices(
                layout,
                picked.into_iter().map(|j| pool[j]),
            )?)
        }
    }
}

fn check_budget(k: usize, maskable: usize) -> Result<(), EngineError> {
    if k == 0 {
        return Err(EngineError::Config("budget must be positive".into()));
    }
    if k > maskable {
        return Err(EngineError::BudgetTooLarge { k, maskable });
    }
    Ok(())
}
