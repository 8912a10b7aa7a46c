//! Cross-lingual transfer by composing language and task SFTs.
//!
//! A language SFT is trained with MLM on a monolingual corpus. A task SFT is
//! trained on source-language data while that language's SFT sits on top of
//! the base; the language SFT is then removed, leaving a diff relative to
//! `base + φ_L`. At inference the task SFT is composed with the target
//! language's SFT.

mod metrics;
mod rundir;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    lt_sft, Budget, CheckpointSelection, EngineError, MaskStrategy, MlmObjective, TaskObjective,
    TrainConfig, TrainContext,
};
use crate::model::{HeadKind, HeadSpec, ModelError, Predictions, TransformerModel};
use crate::param::{
    apply_diffs, ContainerError, GroupPolicy, Mask, ParamError, ParameterSnapshot, SparseDiff,
};
use crate::synth::{Corpus, Dataset, ExampleLabel, SynthError, TaskKind};

pub use metrics::{accuracy, span_f1, spans, Metric};
pub use rundir::{load_diff, RunDir};

/// Share of regular tokens selected for MLM corruption.
pub const MLM_MASK_FRACTION: f64 = 0.15;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TransferError {
    /// The fingerprint mismatch behind this error, if any.
    pub fn is_fingerprint_mismatch(&self) -> bool {
        matches!(
            self,
            TransferError::Param(ParamError::FingerprintMismatch { .. })
                | TransferError::Container(ContainerError::Param(
                    ParamError::FingerprintMismatch { .. }
                ))
                | TransferError::Engine(EngineError::Param(ParamError::FingerprintMismatch { .. }))
                | TransferError::Model(ModelError::Param(ParamError::FingerprintMismatch { .. }))
        )
    }
}

/// Language-SFT defaults for the desk-scale model: MLM with an L1 anchor
/// of weight 0.1, 300 steps per phase.
pub fn language_config() -> TrainConfig {
    TrainConfig {
        lambda: 0.1,
        learning_rate: 1e-3,
        phase1_steps: 300,
        phase2_steps: 300,
        ..TrainConfig::default()
    }
}

/// Task-SFT defaults for the desk-scale model: no anchor, 200 steps per
/// phase.
pub fn task_config() -> TrainConfig {
    TrainConfig {
        lambda: 0.0,
        learning_rate: 1e-3,
        phase1_steps: 200,
        phase2_steps: 200,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub strategy: MaskStrategy,
    pub k: usize,
    pub lambda: f64,
    pub seed: u64,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub final_loss: Option<f64>,
    pub dev_loss: Option<f64>,
}

fn manifest_of(
    cfg: &TrainConfig,
    strategy: MaskStrategy,
    mask: &Mask,
    out: &crate::engine::LtSftOutput,
) -> TrainingManifest {
    TrainingManifest {
        strategy,
        k: mask.count(),
        lambda: cfg.lambda,
        seed: cfg.seed,
        phase1_steps: if out.phase1.is_some() {
            cfg.phase1_steps
        } else {
            0
        },
        phase2_steps: cfg.phase2_steps,
        final_loss: out.phase2.losses.last().copied(),
        dev_loss: out.phase2.dev_loss,
    }
}

#[derive(Clone, Debug)]
pub struct LanguageArtifact {
    pub tag: String,
    pub diff: SparseDiff,
    pub mask: Mask,
    pub manifest: TrainingManifest,
}

#[derive(Clone, Debug)]
pub struct TaskArtifact {
    pub tag: String,
    pub sources: Vec<String>,
    pub diff: SparseDiff,
    pub head_spec: HeadSpec,
    pub head: ParameterSnapshot,
    pub mask: Mask,
    pub manifest: TrainingManifest,
}

/// LT-SFT with the MLM objective on `corpus`.
pub fn train_language_sft(
    model: &TransformerModel,
    base: &ParameterSnapshot,
    corpus: &Corpus,
    dev: Option<&Corpus>,
    cfg: &TrainConfig,
    strategy: MaskStrategy,
) -> Result<LanguageArtifact, TransferError> {
    if corpus.sentences.is_empty() {
        return Err(TransferError::Config(format!(
            "empty corpus for {}",
            corpus.language
        )));
    }
    base.ensure_matches(model.layout().fingerprint())?;
    let obj = MlmObjective::new(
        model,
        corpus.batches(cfg.batch_size),
        dev.map(|d| d.batches(cfg.batch_size)).unwrap_or_default(),
        MLM_MASK_FRACTION,
        cfg.seed,
    )?;
    let out = lt_sft(&obj, &TrainContext::plain(base, cfg.seed), cfg, strategy)?;
    Ok(LanguageArtifact {
        tag: corpus.language.clone(),
        manifest: manifest_of(cfg, strategy, &out.mask, &out),
        diff: out.diff,
        mask: out.mask,
    })
}

pub fn head_spec_for(task: TaskKind) -> HeadSpec {
    match task {
        TaskKind::CategoryTagging => HeadSpec::tokens(task.classes()),
        TaskKind::AgreementDetection => HeadSpec::sequence(task.classes()),
    }
}

/// LT-SFT on task data with the source-language SFT applied during
/// training; the emitted diff is relative to `base + φ_L(source)`.
pub fn train_task_sft(
    model: &TransformerModel,
    base: &ParameterSnapshot,
    data: &Dataset,
    dev: Option<&Dataset>,
    source: Option<&LanguageArtifact>,
    cfg: &TrainConfig,
    strategy: MaskStrategy,
) -> Result<TaskArtifact, TransferError> {
    if data.examples.is_empty() {
        return Err(TransferError::Config(format!(
            "empty task data for {}",
            data.language
        )));
    }
    base.ensure_matches(model.layout().fingerprint())?;
    let overlay = source.map(|_| 0);
    let head_spec = head_spec_for(data.task);
    let batches = data
        .batches(cfg.batch_size)
        .into_iter()
        .map(|b| (b, overlay))
        .collect();
    let dev = dev
        .map(|d| {
            d.batches(cfg.batch_size)
                .into_iter()
                .map(|b| (b, overlay))
                .collect()
        })
        .unwrap_or_default();
    let obj = TaskObjective::new(model, head_spec, batches, dev, cfg.seed)?;
    let ctx = match source {
        Some(s) => TrainContext::over(base, &s.diff, cfg.seed),
        None => TrainContext::plain(base, cfg.seed),
    };
    finish_task(
        &obj,
        &ctx,
        cfg,
        strategy,
        data,
        source.map(|s| vec![s.tag.clone()]).unwrap_or_default(),
    )
}

fn finish_task(
    obj: &TaskObjective<'_>,
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    strategy: MaskStrategy,
    data: &Dataset,
    sources: Vec<String>,
) -> Result<TaskArtifact, TransferError> {
    let out = lt_sft(obj, ctx, cfg, strategy)?;
    let head = out
        .head
        .clone()
        .ok_or_else(|| TransferError::Config("task training produced no head".into()))?;
    Ok(TaskArtifact {
        tag: format!("{}-{}", data.task.as_str(), data.language),
        sources,
        manifest: manifest_of(cfg, strategy, &out.mask, &out),
        head_spec: *obj.head_spec(),
        head,
        diff: out.diff,
        mask: out.mask,
    })
}

/// Monolingual batches from every language, capped, concatenated and
/// shuffled. Each entry carries the index of its language.
pub fn multi_source_schedule(
    datasets: &[&Dataset],
    cap: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<(crate::model::Batch, usize)>, TransferError> {
    if datasets.is_empty() {
        return Err(TransferError::Config(
            "multi-source training needs at least one language".into(),
        ));
    }
    let mut stream = Vec::new();
    for (li, d) in datasets.iter().enumerate() {
        if d.examples.is_empty() || cap == 0 {
            return Err(TransferError::Config(format!(
                "no examples for {}",
                d.language
            )));
        }
        stream.extend(
            d.capped(cap)
                .batches(batch_size)
                .into_iter()
                .map(|b| (b, li)),
        );
    }
    stream.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(stream)
}

/// Task training over several sources, each batch with its own language
/// SFT applied; the emitted diff is relative to the bare base.
pub fn train_task_sft_multi(
    model: &TransformerModel,
    base: &ParameterSnapshot,
    sources: &[(&Dataset, &LanguageArtifact)],
    cap: usize,
    cfg: &TrainConfig,
    strategy: MaskStrategy,
) -> Result<TaskArtifact, TransferError> {
    base.ensure_matches(model.layout().fingerprint())?;
    let data: Vec<&Dataset> = sources.iter().map(|(d, _)| *d).collect();
    let task = data[0].task;
    if data.iter().any(|d| d.task != task) {
        return Err(TransferError::Config(
            "all sources must share one task".into(),
        ));
    }
    let stream = multi_source_schedule(&data, cap, cfg.batch_size, cfg.seed)?;
    let batches = stream.into_iter().map(|(b, l)| (b, Some(l))).collect();
    let obj = TaskObjective::new(model, head_spec_for(task), batches, Vec::new(), cfg.seed)?;
    let ctx = TrainContext {
        base,
        overlays: sources.iter().map(|(_, l)| &l.diff).collect(),
        anchor: None,
        head_seed: cfg.seed,
    };
    let names: Vec<String> = sources.iter().map(|(_, l)| l.tag.clone()).collect();
    let merged = Dataset {
        language: names.join("+"),
        task,
        examples: Vec::new(),
    };
    finish_task(&obj, &ctx, cfg, strategy, &merged, names)
}

/// `base + φ_T (+ φ_L(target))`; without a target this is TA-only.
pub fn zero_shot_apply(
    base: &ParameterSnapshot,
    task: &TaskArtifact,
    target: Option<&LanguageArtifact>,
) -> Result<ParameterSnapshot, TransferError> {
    let mut diffs = vec![&task.diff];
    if let Some(t) = target {
        diffs.push(&t.diff);
    }
    Ok(apply_diffs(base, &diffs)?)
}

/// Scores a composed model on a labelled dataset.
pub fn evaluate(
    model: &TransformerModel,
    params: &ParameterSnapshot,
    head_spec: &HeadSpec,
    head: &ParameterSnapshot,
    data: &Dataset,
    metric: Metric,
) -> Result<f64, TransferError> {
    if data.examples.is_empty() {
        return Err(TransferError::Config("empty evaluation set".into()));
    }
    let classes = head_spec.classes as u32;
    let mut gold = Vec::with_capacity(data.examples.len());
    for e in &data.examples {
        let labels = match (&e.label, head_spec.kind) {
            (ExampleLabel::Tokens(l), HeadKind::TokenClassification) => l.clone(),
            (ExampleLabel::Sequence(l), HeadKind::SequenceClassification) => vec![*l],
            _ => return Err(TransferError::Config("labels do not match the head".into())),
        };
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TransferError::Config(format!("unknown label {}", bad)));
        }
        gold.push(labels);
    }
    let mut pred = Vec::with_capacity(gold.len());
    for batch in data.batches(64) {
        match model.predict(params, head_spec, head, &batch)? {
            Predictions::Tokens(rows) => {
                for (b, row) in rows.into_iter().enumerate() {
                    // drop the [CLS] position
                    pred.push(
                        row[1..batch.seq_len(b)]
                            .iter()
                            .map(|p| p.unwrap_or(0))
                            .collect(),
                    );
                }
            }
            Predictions::Sequence(labels) => pred.extend(labels.into_iter().map(|l| vec![l])),
        }
    }
    match metric {
        Metric::Accuracy => accuracy(&gold, &pred),
        Metric::SpanF1 { outside } => span_f1(&gold, &pred, outside),
    }
}

/// Checkpoint regime for sweeps and tests that need exact replays.
pub fn with_final_checkpoint(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        checkpoint: CheckpointSelection::Final,
        ..cfg.clone()
    }
}

/// Pretraining: full MLM fine-tuning of a fresh model on all corpora.
pub fn pretrain(
    model: &TransformerModel,
    corpora: &[&Corpus],
    steps: usize,
    cfg: &TrainConfig,
) -> Result<ParameterSnapshot, TransferError> {
    let batches: Vec<_> = corpora
        .iter()
        .flat_map(|c| c.batches(cfg.batch_size))
        .collect();
    if batches.is_empty() {
        return Err(TransferError::Config(
            "pretraining needs a non-empty corpus".into(),
        ));
    }
    let init = model.init(cfg.seed);
    let obj = MlmObjective::new(model, batches, Vec::new(), MLM_MASK_FRACTION, cfg.seed)?;
    let cfg = TrainConfig {
        phase2_steps: steps,
        lambda: 0.0,
        policy: GroupPolicy::none(),
        budget: Budget::Fraction(1.0),
        checkpoint: CheckpointSelection::Final,
        ..cfg.clone()
    };
    let out = crate::engine::full_finetune(&obj, &TrainContext::plain(&init, cfg.seed), &cfg)?;
    Ok(out.params)
}

/// Mean MLM loss of `params` on `corpus` with fixed corruption.
pub fn mlm_dev_loss(
    model: &TransformerModel,
    params: &ParameterSnapshot,
    corpus: &Corpus,
    batch_size: usize,
) -> Result<f64, TransferError> {
    let obj = MlmObjective::new(
        model,
        corpus.batches(batch_size),
        corpus.batches(batch_size),
        MLM_MASK_FRACTION,
        0,
    )?;
    obj.dev_loss_of(params)?
        .ok_or_else(|| TransferError::Config("empty corpus".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_task_data, SuiteConfig};

    fn toy() -> (Vec<crate::synth::LanguageSpec>, Vec<Dataset>) {
        let langs = SuiteConfig::default().build(512).unwrap();
        let data = langs[..2]
            .iter()
            .map(|l| generate_task_data(l, TaskKind::CategoryTagging, 45).unwrap())
            .collect();
        (langs, data)
    }

    #[test]
    fn schedule_caps_and_stays_monolingual() {
        let (_, data) = toy();
        let refs: Vec<&Dataset> = data.iter().collect();
        let s = multi_source_schedule(&refs, 10, 4, 1).unwrap();
        for li in 0..2 {
            let rows: usize = s
                .iter()
                .filter(|(_, l)| *l == li)
                .map(|(b, _)| b.len())
                .sum();
            assert_eq!(rows, 10);
        }
        for (b, l) in &s {
            assert_eq!(b.language.as_deref(), Some(data[*l].language.as_str()));
        }
        assert_eq!(s.len(), 6);
        let again = multi_source_schedule(&refs, 10, 4, 1).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn batch_counts_follow_capped_sizes() {
        // counting oracle: ceil(min(size, cap) / batch) per language
        let (langs, _) = toy();
        let a = generate_task_data(&langs[0], TaskKind::CategoryTagging, 37).unwrap();
        let b = generate_task_data(&langs[1], TaskKind::CategoryTagging, 90).unwrap();
        let s = multi_source_schedule(&[&a, &b], 60, 8, 3).unwrap();
        let count = |l| s.iter().filter(|(_, x)| *x == l).count();
        assert_eq!(count(0), 5);
        assert_eq!(count(1), 8);
    }

    #[test]
    fn single_language_schedule_is_plain() {
        let (_, data) = toy();
        let s = multi_source_schedule(&[&data[0]], 1000, 5, 2).unwrap();
        assert_eq!(s.len(), 9);
        assert!(s.iter().all(|(_, l)| *l == 0));
        assert!(multi_source_schedule(&[], 10, 4, 0).is_err());
    }
}
