use std::sync::Arc;

use super::optim::{l1_anchor, linear_decay, OptimizerState};
use super::{select_mask, CheckpointSelection, EngineError, MaskStrategy, TrainConfig};
use crate::model::ModelError;
use crate::numeric::{CounterRng, NumericError};
use crate::param::{
    apply_diffs, canonical_delta, compose, Layout, Mask, ParameterGroups, ParameterSnapshot,
    SparseDiff,
};

/// Training loss with gradients for the body and, if any, the head.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub body: Vec<f64>,
    pub head: Option<Vec<f64>>,
}

/// Something a trainer can minimize: a loss over body parameters and an
/// optional task head, evaluated on the batch scheduled for each step.
pub trait Objective {
    fn layout(&self) -> &Arc<Layout>;

    fn groups(&self) -> &ParameterGroups;

    /// Fresh head parameters; `None` for head-less objectives.
    fn init_head(&self, seed: u64) -> Result<Option<ParameterSnapshot>, EngineError>;

    /// Index into [`TrainContext::overlays`] applied while training `step`.
    fn overlay_at(&self, _step: usize) -> Option<usize> {
        None
    }

    fn loss_grad(
        &self,
        body: &ParameterSnapshot,
        head: Option<&ParameterSnapshot>,
        step: usize,
        cfg: &TrainConfig,
    ) -> Result<LossGrad, EngineError>;

    /// Held-out loss; `params(overlay)` builds the current body with the
    /// given overlay. `None` when there is no dev data.
    fn dev_loss(
        &self,
        _params: &mut dyn FnMut(Option<usize>) -> Result<ParameterSnapshot, EngineError>,
        _head: Option<&ParameterSnapshot>,
    ) -> Option<Result<f64, EngineError>> {
        None
    }
}

/// Frozen inputs of a training run.
#[derive(Clone, Debug)]
pub struct TrainContext<'a> {
    pub base: &'a ParameterSnapshot,
    /// Diffs an objective may apply on top of `base` for individual steps.
    pub overlays: Vec<&'a SparseDiff>,
    /// Overlay the emitted diff is measured against; `None` is the bare base.
    pub anchor: Option<usize>,
    /// Head initialization seed, reused by every phase.
    pub head_seed: u64,
}

impl<'a> TrainContext<'a> {
    pub fn plain(base: &'a ParameterSnapshot, head_seed: u64) -> Self {
        TrainContext {
            base,
            overlays: Vec::new(),
            anchor: None,
            head_seed,
        }
    }

    /// Training on top of a single overlay, with the diff measured against it.
    pub fn over(base: &'a ParameterSnapshot, overlay: &'a SparseDiff, head_seed: u64) -> Self {
        TrainContext {
            base,
            overlays: vec![overlay],
            anchor: Some(0),
            head_seed,
        }
    }

    /// `base + overlay + delta` with the arithmetic of [`apply_diffs`].
    fn effective(
        &self,
        overlay: Option<usize>,
        delta: &[f32],
    ) -> Result<ParameterSnapshot, EngineError> {
        let ov = self.overlay_dense(overlay)?;
        let values = self
            .base
            .values()
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let o = ov.as_ref().map_or(0.0, |v| v[i]);
                match (o != 0.0, delta[i] != 0.0) {
                    (false, false) => b,
                    (true, false) => compose(b, &mut [o]),
                    (false, true) => compose(b, &mut [delta[i]]),
                    (true, true) => compose(b, &mut [o, delta[i]]),
                }
            })
            .collect();
        Ok(ParameterSnapshot::from_flat(
            self.base.layout().clone(),
            values,
        )?)
    }

    fn overlay_dense(&self, overlay: Option<usize>) -> Result<Option<Vec<f32>>, EngineError> {
        overlay
            .map(|o| {
                self.overlays
                    .get(o)
                    .map(|d| d.to_dense())
                    .ok_or_else(|| EngineError::Config(format!("overlay {} not provided", o)))
            })
            .transpose()
    }

    fn check(&self, layout: &Layout) -> Result<(), EngineError> {
        self.base.layout().ensure_same(layout)?;
        for o in &self.overlays {
            self.base.layout().ensure_same(o.layout())?;
        }
        if let Some(a) = self.anchor {
            if a >= self.overlays.len() {
                return Err(EngineError::Config(format!(
                    "anchor overlay {} not provided",
                    a
                )));
            }
        }
        Ok(())
    }
}

/// Result of one training phase.
#[derive(Clone, Debug)]
pub struct PhaseOutput {
    /// Trained body with the anchor overlay applied.
    pub params: ParameterSnapshot,
    /// The starting point the diff is measured from.
    pub reference: ParameterSnapshot,
    /// `params − reference` such that `reference + diff == params` bitwise.
    pub diff: SparseDiff,
    pub head: Option<ParameterSnapshot>,
    /// Training loss per step, penalty included.
    pub losses: Vec<f64>,
    /// Number of steps behind the returned checkpoint.
    pub selected_step: usize,
    pub dev_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct LtSftOutput {
    pub diff: SparseDiff,
    pub head: Option<ParameterSnapshot>,
    pub mask: Mask,
    pub phase1: Option<PhaseOutput>,
    pub phase2: PhaseOutput,
}

fn is_divergence(e: &EngineError) -> bool {
    matches!(
        e,
        EngineError::Model(ModelError::NonFiniteLoss)
            | EngineError::Model(ModelError::Numeric(NumericError::NonFinite(_)))
    )
}

/// Smallest-magnitude diff rebuilding `after` from the base and anchor
/// overlay, falling back to the trainer's own offset where no nearer
/// witness exists.
fn extract(
    after: &ParameterSnapshot,
    ctx: &TrainContext<'_>,
    delta: &[f32],
) -> Result<SparseDiff, EngineError> {
    let ov = ctx.overlay_dense(ctx.anchor)?;
    let mut indices = Vec::new();
    let mut deltas = Vec::new();
    for (i, (&y, &b)) in after.values().iter().zip(ctx.base.values()).enumerate() {
        let o = ov.as_ref().map_or(0.0, |v| v[i]);
        let parts: &[f32] = if o != 0.0 { &[o] } else { &[] };
        let mut d = canonical_delta(y, b, parts);
        if d != 0.0 && compose(b, &mut [parts, &[d]].concat()).to_bits() != y.to_bits() {
            d = delta[i];
        }
        if d != 0.0 {
            indices.push(i as u32);
            deltas.push(d);
        }
    }
    Ok(SparseDiff::from_entries(
        after.layout().clone(),
        indices,
        deltas,
    )?)
}

fn run_phase<O: Objective + ?Sized>(
    obj: &O,
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    trainable: &Mask,
    steps: usize,
    phase: u8,
) -> Result<PhaseOutput, EngineError> {
    cfg.validate()?;
    ctx.check(obj.layout())?;
    ctx.base.layout().ensure_same(trainable.layout())?;
    let n = ctx.base.total();
    let idx: Vec<usize> = trainable.ones().collect();
    let mut delta = vec![0.0f32; n];
    let mut head = obj.init_head(ctx.head_seed)?;
    let head_idx: Vec<usize> = (0..head.as_ref().map_or(0, |h| h.total())).collect();
    let mut body_opt = OptimizerState::new(cfg.optimizer, n);
    let mut head_opt = OptimizerState::new(cfg.optimizer, head_idx.len());
    let mut references: Vec<Option<ParameterSnapshot>> = vec![None; ctx.overlays.len() + 1];
    let mut losses = Vec::with_capacity(steps);
    let mut best: Option<(f64, usize, Vec<f32>, Option<ParameterSnapshot>)> = None;

    for t in 0..steps {
        let diverged = |e: EngineError| {
            if is_divergence(&e) {
                EngineError::Divergence { phase, step: t }
            } else {
                e
            }
        };
        let ov = obj.overlay_at(t);
        let params = ctx.effective(ov, &delta)?;
        let mut lg = obj
            .loss_grad(&params, head.as_ref(), t, cfg)
            .map_err(diverged)?;
        if cfg.lambda > 0.0 {
            let slot = ov.map_or(0, |o| o + 1);
            if references[slot].is_none() {
                references[slot] = Some(ctx.effective(ov, &vec![0.0; n])?);
            }
            let reference = references[slot].as_ref().expect("cached reference");
            let (penalty, grad) = l1_anchor(params.values(), reference.values(), cfg.lambda, n);
            lg.loss += penalty;
            for (g, p) in lg.body.iter_mut().zip(grad) {
                *g += p;
            }
        }
        let finite = lg.loss.is_finite()
            && idx.iter().all(|&i| lg.body[i].is_finite())
            && lg
                .head
                .as_ref()
                .is_none_or(|h| h.iter().all(|g| g.is_finite()));
        if !finite {
            return Err(EngineError::Divergence { phase, step: t });
        }
        losses.push(lg.loss);
        let lr = linear_decay(cfg.learning_rate, t, steps);
        body_opt.step(&mut delta, params.values(), &lg.body, lr, &idx);
        if let (Some(h), Some(g)) = (head.as_mut(), lg.head.as_ref()) {
            let current = h.values().to_vec();
            let mut values = h.values().to_vec();
            head_opt.step(&mut values, &current, g, lr, &head_idx);
            *h = ParameterSnapshot::from_flat(h.layout().clone(), values)?;
        }
        if let CheckpointSelection::BestOnDev { every } = cfg.checkpoint {
            if (t + 1) % every == 0 || t + 1 == steps {
                let mut build = |o: Option<usize>| ctx.effective(o, &delta);
                if let Some(loss) = obj.dev_loss(&mut build, head.as_ref()) {
                    let loss = loss.map_err(diverged)?;
                    if best.as_ref().is_none_or(|b| loss < b.0) {
                        best = Some((loss, t + 1, delta.clone(), head.clone()));
                    }
                }
            }
        }
    }

    let (selected_step, dev_loss) = match best {
        Some((loss, step, d, h)) => {
            delta = d;
            head = h;
            (step, Some(loss))
        }
        None => (steps, None),
    };
    let params = ctx.effective(ctx.anchor, &delta)?;
    let reference = ctx.effective(ctx.anchor, &vec![0.0; n])?;
    let diff = extract(&params, ctx, &delta)?;
    Ok(PhaseOutput {
        params,
        reference,
        diff,
        head,
        losses,
        selected_step,
        dev_loss,
    })
}

/// Phase 1: every maskable parameter and the head train for
/// `cfg.phase1_steps` steps.
pub fn phase1_full_finetune<O: Objective + ?Sized>(
    obj: &O,
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
) -> Result<PhaseOutput, EngineError> {
    let maskable = cfg.policy.maskable(obj.groups());
    run_phase(obj, ctx, cfg, &maskable, cfg.phase1_steps, 1)
}

/// Phase 2: rewind to the start point and train only `mask` (plus the
/// head) for `cfg.phase2_steps` steps with fresh optimizer state.
pub fn phase2_masked_finetune<O: Objective + ?Sized>(
    obj: &O,
    ctx: &TrainContext<'_>,
    mask: &Mask,
    cfg: &TrainConfig,
) -> Result<PhaseOutput, EngineError> {
    let maskable = cfg.policy.maskable(obj.groups());
    if !mask.is_subset(&maskable) {
        return Err(EngineError::Config(
            "mask selects parameters excluded by the group policy".into(),
        ));
    }
    run_phase(obj, ctx, cfg, mask, cfg.phase2_steps, 2)
}

/// Unconstrained fine-tuning of all maskable parameters with the Phase-2 regime.
pub fn full_finetune<O: Objective + ?Sized>(
    obj: &O,
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
) -> Result<PhaseOutput, EngineError> {
    let maskable = cfg.policy.maskable(obj.groups());
    run_phase(obj, ctx, cfg, &maskable, cfg.phase2_steps, 2)
}

/// Full fine-tune, select a mask, rewind, retrain the mask.
///
/// Strategies whose mask does not depend on Phase 1 skip it.
pub fn lt_sft<O: Objective + ?Sized>(
    obj: &O,
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    strategy: MaskStrategy,
) -> Result<LtSftOutput, EngineError> {
    cfg.validate()?;
    ctx.check(obj.layout())?;
    let maskable = cfg.policy.maskable(obj.groups());
    let k = match strategy {
        MaskStrategy::BiasOnly => 0,
        _ => cfg.budget.resolve(maskable.count())?,
    };
    let mask_seed = CounterRng::new(cfg.seed).u64(0x6d61_736b);
    let (mask, phase1) = if strategy.needs_phase1() {
        let p1 = phase1_full_finetune(obj, ctx, cfg)?;
        let mask = select_mask(
            &p1.reference,
            &p1.params,
            obj.groups(),
            &cfg.policy,
            strategy,
            k,
            mask_seed,
        )?;
        (mask, Some(p1))
    } else {
        let start = apply_diffs(
            ctx.base,
            &ctx.anchor
                .map(|a| vec![ctx.overlays[a]])
                .unwrap_or_default(),
        )?;
        let mask = select_mask(
            &start,
            &start,
            obj.groups(),
            &cfg.policy,
            strategy,
            k,
            mask_seed,
        )?;
        (mask, None)
    };
    let phase2 = phase2_masked_finetune(obj, ctx, &mask, cfg)?;
    Ok(LtSftOutput {
        diff: phase2.diff.clone(),
        head: phase2.head.clone(),
        mask,
        phase1,
        phase2,
    })
}
