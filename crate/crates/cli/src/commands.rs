use std::path::{Path, PathBuf};

use serde::Serialize;
use sparse_tune::analysis::{
    density_sweep, expected_random_overlap, overlap_matrix, SweepLanguage, SweepSuite,
};
use sparse_tune::engine::{MaskStrategy, TrainConfig};
use sparse_tune::model::{HeadKind, HeadSpec, ModelSpec, TransformerModel};
use sparse_tune::numeric::CounterRng;
use sparse_tune::param::{deserialize_diff, ParameterSnapshot};
use sparse_tune::synth::{
    generate_corpus, generate_task_data, read_corpus, read_dataset, write_corpus, write_dataset,
    Corpus, Dataset, LanguageSpec, TaskKind,
};
use sparse_tune::transfer::{
    evaluate, mlm_dev_loss, pretrain, train_language_sft, train_task_sft, train_task_sft_multi,
    zero_shot_apply, LanguageArtifact, RunDir, TaskArtifact,
};

use crate::args::{
    Command, Common, Compose, Eval, Inspect, Overlap, TrainLang, TrainTask, Training,
};
use crate::config::Config;
use crate::error::CliError;
use crate::manifest::Recorder;

const TASKS: [TaskKind; 2] = [TaskKind::CategoryTagging, TaskKind::AgreementDetection];

/// Resolved configuration, run directory and manifest recorder for one command.
struct Ctx {
    cfg: Config,
    run: RunDir,
    rec: Recorder,
}

impl Ctx {
    fn new(command: &str, common: &Common) -> Result<Ctx, CliError> {
        let mut cfg = Config::load(common.config.as_deref())?;
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(d) = &common.out_dir {
            cfg.out_dir = d.clone();
        }
        cfg.language.seed = cfg.seed;
        cfg.task.seed = cfg.seed;
        let run = RunDir::new(&cfg.out_dir);
        let mut rec = Recorder::new(&run, command);
        rec.seeds.push(cfg.seed);
        if let Some(path) = &common.config {
            rec.input(path)?;
        }
        Ok(Ctx { cfg, run, rec })
    }

    fn finish(self, name: &str) -> Result<(), CliError> {
        self.rec.finish(name, &self.cfg)?;
        Ok(())
    }

    fn suite(&mut self) -> Result<Vec<LanguageSpec>, CliError> {
        let bytes = self.rec.read(&self.run.data("suite.json"))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Invalid(format!("suite.json: {e}")))
    }

    fn language<'a>(
        &self,
        suite: &'a [LanguageSpec],
        tag: &str,
    ) -> Result<&'a LanguageSpec, CliError> {
        suite
            .iter()
            .find(|l| l.tag == tag)
            .ok_or_else(|| CliError::Invalid(format!("unknown language {tag:?}")))
    }

    fn corpus(&mut self, tag: &str, kind: &str) -> Result<Corpus, CliError> {
        let bytes = self
            .rec
            .read(&self.run.data(&format!("{tag}.{kind}.txt")))?;
        Ok(read_corpus(&bytes[..], tag)?)
    }

    fn dataset(&mut self, tag: &str, task: TaskKind, split: &str) -> Result<Dataset, CliError> {
        let bytes = self.rec.read(
            &self
                .run
                .data(&format!("{tag}.{}.{split}.tsv", task.as_str())),
        )?;
        Ok(read_dataset(&bytes[..], tag, task)?)
    }

    fn base(&mut self) -> Result<(TransformerModel, ParameterSnapshot), CliError> {
        let path = self.run.base_checkpoint();
        let (spec, base) = RunDir::load_base(&path)?;
        self.rec.input(&path)?;
        let model = model_for(spec)?;
        base.ensure_matches(model.layout().fingerprint())?;
        Ok((model, base))
    }

    fn load_language(
        &mut self,
        path: &Path,
        base: &ParameterSnapshot,
    ) -> Result<LanguageArtifact, CliError> {
        let art = RunDir::load_language(path, base.fingerprint())?;
        self.rec.input(path)?;
        let mask = path.with_extension("mask");
        if mask.exists() {
            self.rec.input(&mask)?;
        }
        Ok(art)
    }

    fn load_task(
        &mut self,
        path: &Path,
        base: &ParameterSnapshot,
    ) -> Result<TaskArtifact, CliError> {
        let art = RunDir::load_task(path, base.fingerprint())?;
        self.rec.input(path)?;
        self.rec.input(&path.with_extension("head"))?;
        Ok(art)
    }
}

fn model_for(spec: ModelSpec) -> Result<TransformerModel, CliError> {
    TransformerModel::new(spec).map_err(|e| CliError::Invalid(e.to_string()))
}

/// File stem of an artifact: the tag, suffixed with the strategy unless it is LT.
fn artifact_name(tag: &str, strategy: MaskStrategy) -> String {
    match strategy {
        MaskStrategy::LotteryTicket => tag.to_string(),
        s => format!("{tag}-{}", s.as_str()),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn composed_name(task: &Path, target: Option<&Path>) -> String {
    format!(
        "{}+{}",
        stem(task),
        target.map(stem).unwrap_or_else(|| "ta-only".into())
    )
}

fn task_of(head: &HeadSpec) -> TaskKind {
    match head.kind {
        HeadKind::TokenClassification => TaskKind::CategoryTagging,
        HeadKind::SequenceClassification => TaskKind::AgreementDetection,
    }
}

fn with_training(cfg: &TrainConfig, t: &Training) -> TrainConfig {
    let mut cfg = cfg.clone();
    if let Some(b) = t.budget_k {
        cfg.budget = b;
    }
    if let Some(l) = t.lambda {
        cfg.lambda = l;
    }
    cfg
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn bytes_of(
    f: impl FnOnce(&mut Vec<u8>) -> Result<(), sparse_tune::synth::SynthError>,
) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn run(command: Command) -> Result<(), CliError> {
    let name = command.name();
    let ctx = Ctx::new(name, command.common())?;
    match command {
        Command::GenData(_) => gen_data(ctx),
        Command::Pretrain(_) => pretrain_base(ctx),
        Command::TrainLang(a) => train_lang(ctx, &a),
        Command::TrainTask(a) => train_task(ctx, &a),
        Command::Compose(a) => compose(ctx, &a),
        Command::Eval(a) => eval(ctx, &a),
        Command::SweepDensity(_) => sweep(ctx),
        Command::Overlap(a) => overlap(ctx, &a),
        Command::InspectSft(a) => inspect(ctx, &a),
    }
}

fn gen_data(mut ctx: Ctx) -> Result<(), CliError> {
    let suite = ctx.cfg.suite.build(ctx.cfg.model.vocab_size)?;
    let streams = CounterRng::new(ctx.cfg.seed);
    let json = serde_json::to_string_pretty(&suite).map_err(|e| CliError::Failed(e.to_string()))?;
    ctx.rec
        .write(&ctx.run.data("suite.json"), format!("{json}\n").as_bytes())?;
    let d = ctx.cfg.data.clone();
    for spec in &suite {
        let n = if d.low_resource.contains(&spec.tag) {
            d.low_resource_sentences
        } else {
            d.pretrain_sentences
        };
        let corpora = [("pretrain", n, 1), ("mono", d.language_sentences, 2)];
        for (kind, count, stream) in corpora {
            let c = generate_corpus(&spec.reseeded(streams.u64(stream)), count)?;
            let bytes = bytes_of(|b| write_corpus(b, &c))?;
            ctx.rec
                .write(&ctx.run.data(&format!("{}.{kind}.txt", spec.tag)), &bytes)?;
        }
        for (i, task) in TASKS.into_iter().enumerate() {
            let splits = [("train", d.task_examples), ("eval", d.eval_examples)];
            for (j, (split, count)) in splits.into_iter().enumerate() {
                let stream = 3 + 2 * i as u64 + j as u64;
                let data = generate_task_data(&spec.reseeded(streams.u64(stream)), task, count)?;
                let bytes = bytes_of(|b| write_dataset(b, &data))?;
                ctx.rec.write(
                    &ctx.run
                        .data(&format!("{}.{}.{split}.tsv", spec.tag, task.as_str())),
                    &bytes,
                )?;
            }
        }
    }
    ctx.rec
        .metrics
        .insert("languages".into(), suite.len() as f64);
    ctx.finish("gen-data")
}

fn pretrain_base(mut ctx: Ctx) -> Result<(), CliError> {
    let suite = ctx.suite()?;
    let corpora = suite
        .iter()
        .map(|l| ctx.corpus(&l.tag, "pretrain"))
        .collect::<Result<Vec<_>, _>>()?;
    let model = model_for(ctx.cfg.model.clone())?;
    let p = &ctx.cfg.pretrain;
    let cfg = TrainConfig {
        learning_rate: p.learning_rate,
        batch_size: p.batch_size,
        seed: ctx.cfg.seed,
        ..TrainConfig::default()
    };
    let refs: Vec<&Corpus> = corpora.iter().collect();
    let base = pretrain(&model, &refs, p.steps, &cfg)?;
    let path = ctx.run.save_base(model.spec(), &base)?;
    ctx.rec.output(&path)?;
    for c in &corpora {
        let head = Corpus {
            language: c.language.clone(),
            sentences: c.sentences.iter().take(100).cloned().collect(),
        };
        let loss = mlm_dev_loss(&model, &base, &head, p.batch_size)?;
        ctx.rec
            .metrics
            .insert(format!("mlm_loss.{}", c.language), loss);
    }
    ctx.finish("pretrain")
}

fn train_lang(mut ctx: Ctx, a: &TrainLang) -> Result<(), CliError> {
    let suite = ctx.suite()?;
    ctx.language(&suite, &a.lang)?;
    let (model, base) = ctx.base()?;
    let corpus = ctx.corpus(&a.lang, "mono")?;
    let strategy = a.training.strategy.into();
    let cfg = with_training(&ctx.cfg.language, &a.training);
    let art = train_language_sft(&model, &base, &corpus, None, &cfg, strategy)?;
    let name = artifact_name(&a.lang, strategy);
    let path = ctx.run.save_language(&name, &art)?;
    ctx.rec.output(&path)?;
    ctx.rec.output(&path.with_extension("mask"))?;
    ctx.rec.metrics.insert("k".into(), art.mask.count() as f64);
    ctx.rec.metrics.insert("density".into(), art.diff.density());
    if let Some(l) = art.manifest.final_loss {
        ctx.rec.metrics.insert("final_loss".into(), l);
    }
    emit(&format!("{}\n", path.display()));
    ctx.finish(&format!("train-lang-{name}"))
}

fn train_task(mut ctx: Ctx, a: &TrainTask) -> Result<(), CliError> {
    let task: TaskKind = a.task.into();
    let (model, base) = ctx.base()?;
    let sources = a
        .source_sft
        .iter()
        .map(|p| ctx.load_language(p, &base))
        .collect::<Result<Vec<_>, _>>()?;
    let strategy = a.training.strategy.into();
    let cfg = with_training(&ctx.cfg.task, &a.training);
    let art = if sources.len() >= 2 {
        if a.lang.is_some() {
            return Err(CliError::Usage(
                "--lang cannot be combined with several --source-sft".into(),
            ));
        }
        let data = sources
            .iter()
            .map(|s| ctx.dataset(&s.tag, task, "train"))
            .collect::<Result<Vec<_>, _>>()?;
        let pairs: Vec<(&Dataset, &LanguageArtifact)> = data.iter().zip(&sources).collect();
        train_task_sft_multi(
            &model,
            &base,
            &pairs,
            ctx.cfg.data.multi_source_cap,
            &cfg,
            strategy,
        )?
    } else {
        let lang = a.lang.as_deref().ok_or_else(|| {
            CliError::Usage("--lang is required for single-source training".into())
        })?;
        if let Some(s) = sources.first() {
            if s.tag != lang {
                return Err(CliError::Invalid(format!(
                    "source SFT is for {} but --lang is {lang}",
                    s.tag
                )));
            }
        }
        let data = ctx.dataset(lang, task, "train")?;
        train_task_sft(&model, &base, &data, None, sources.first(), &cfg, strategy)?
    };
    let name = artifact_name(&art.tag, strategy);
    let path = ctx.run.save_task(&name, &art)?;
    for ext in ["sft", "mask", "head"] {
        ctx.rec.output(&path.with_extension(ext))?;
    }
    ctx.rec.metrics.insert("k".into(), art.mask.count() as f64);
    if let Some(l) = art.manifest.final_loss {
        ctx.rec.metrics.insert("final_loss".into(), l);
    }
    emit(&format!("{}\n", path.display()));
    ctx.finish(&format!("train-task-{name}"))
}

/// Loads the task SFT and optional target SFT and returns the composed body.
fn composed(
    ctx: &mut Ctx,
    base: &ParameterSnapshot,
    task_sft: &Path,
    target_sft: Option<&Path>,
) -> Result<(ParameterSnapshot, TaskArtifact, Vec<String>), CliError> {
    let task = ctx.load_task(task_sft, base)?;
    let target = target_sft.map(|p| ctx.load_language(p, base)).transpose()?;
    let params = zero_shot_apply(base, &task, target.as_ref())?;
    let mut parts = vec![stem(task_sft)];
    parts.extend(target_sft.map(stem));
    Ok((params, task, parts))
}

fn compose(mut ctx: Ctx, a: &Compose) -> Result<(), CliError> {
    let (_, base) = ctx.base()?;
    let t = &a.target;
    let target = if t.ta_only {
        None
    } else {
        t.target_sft.as_deref()
    };
    let (params, task, parts) = composed(&mut ctx, &base, &t.task_sft, target)?;
    let name = composed_name(&t.task_sft, target);
    let path = ctx.run.save_composed(&name, &params, &task, &parts)?;
    ctx.rec.output(&path)?;
    ctx.rec.output(&path.with_extension("head"))?;
    emit(&format!("{}\n", path.display()));
    ctx.finish(&format!("compose-{name}"))
}

fn eval(mut ctx: Ctx, a: &Eval) -> Result<(), CliError> {
    let (model, base) = ctx.base()?;
    let (name, params, head_spec, head) = match (&a.composed, &a.task_sft) {
        (Some(path), _) => {
            let (params, spec, head) = RunDir::load_composed(path, base.fingerprint())?;
            ctx.rec.input(path)?;
            ctx.rec.input(&path.with_extension("head"))?;
            (format!("ckpt-{}", stem(path)), params, spec, head)
        }
        (None, Some(task_sft)) => {
            if !a.ta_only && a.target_sft.is_none() {
                return Err(CliError::Usage(
                    "eval needs --target-sft or --ta-only".into(),
                ));
            }
            let target = a.target_sft.as_deref();
            let (params, task, _) = composed(&mut ctx, &base, task_sft, target)?;
            (
                composed_name(task_sft, target),
                params,
                task.head_spec,
                task.head,
            )
        }
        (None, None) => {
            return Err(CliError::Usage(
                "eval needs --task-sft or --composed".into(),
            ))
        }
    };
    let task = task_of(&head_spec);
    let data = ctx.dataset(&a.lang, task, "eval")?;
    let metric = ctx.cfg.eval.metric_for(task);
    let value = evaluate(&model, &params, &head_spec, &head, &data, metric)?;
    let line = format!(
        "{}\t{}\t{}\t{}\t{}",
        name,
        task.as_str(),
        a.lang,
        metric.name(),
        value
    );
    let tsv = format!("model\ttask\tlanguage\tmetric\tvalue\n{line}\n");
    ctx.rec.write(
        &ctx.run.metrics(&format!("eval-{name}-{}", a.lang)),
        tsv.as_bytes(),
    )?;
    ctx.rec.metrics.insert(metric.name().into(), value);
    emit(&format!("{line}\n"));
    ctx.finish(&format!("eval-{name}-{}", a.lang))
}

fn sweep(mut ctx: Ctx) -> Result<(), CliError> {
    let s = ctx.cfg.sweep.clone();
    let suite = ctx.suite()?;
    for tag in std::iter::once(&s.source).chain(&s.targets) {
        ctx.language(&suite, tag)?;
    }
    let (model, base) = ctx.base()?;
    let src_corpus = ctx.corpus(&s.source, "mono")?;
    let src_data = ctx.dataset(&s.source, s.task, "train")?;
    let mut targets = Vec::new();
    for t in &s.targets {
        targets.push((ctx.corpus(t, "mono")?, ctx.dataset(t, s.task, "eval")?));
    }
    let mut language_config = ctx.cfg.language.clone();
    if let Some(n) = s.language_steps {
        language_config.phase1_steps = n;
        language_config.phase2_steps = n;
    }
    let suite = SweepSuite {
        model: &model,
        base: &base,
        source: SweepLanguage {
            corpus: &src_corpus,
            data: &src_data,
        },
        targets: targets
            .iter()
            .map(|(corpus, data)| SweepLanguage { corpus, data })
            .collect(),
        language_config,
        task_config: ctx.cfg.task.clone(),
        metric: ctx.cfg.eval.metric_for(s.task),
    };
    let grid = density_sweep(&s.levels, &suite, &s.seeds)?;
    for c in grid.failures() {
        #[derive(Serialize)]
        struct Warning<'a> {
            warning: &'a str,
            task_density: f64,
            lang_density: f64,
            seed: u64,
            message: &'a str,
        }
        let line = Warning {
            warning: "cell-failed",
            task_density: c.task_density,
            lang_density: c.lang_density,
            seed: c.seed,
            message: c
                .metric
                .as_ref()
                .err()
                .map(String::as_str)
                .unwrap_or_default(),
        };
        eprintln!(
            "{}",
            serde_json::to_string(&line).map_err(|e| CliError::Failed(e.to_string()))?
        );
    }
    let path = ctx.run.metrics("sweep-density");
    ctx.rec.write(&path, grid.to_tsv().as_bytes())?;
    ctx.rec.seeds = s.seeds.clone();
    ctx.rec
        .metrics
        .insert("cells".into(), grid.cells.len() as f64);
    ctx.rec
        .metrics
        .insert("failed".into(), grid.failures().count() as f64);
    emit(&grid.to_tsv());
    ctx.finish("sweep-density")
}

fn overlap(mut ctx: Ctx, a: &Overlap) -> Result<(), CliError> {
    let (model, base) = ctx.base()?;
    let paths: Vec<PathBuf> = if a.sfts.is_empty() {
        let dir = ctx.run.root().join("langs");
        let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| CliError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "sft"))
            .collect();
        found.sort();
        found
    } else {
        a.sfts.clone()
    };
    let arts = paths
        .iter()
        .map(|p| ctx.load_language(p, &base))
        .collect::<Result<Vec<_>, _>>()?;
    let names: Vec<String> = paths.iter().map(|p| stem(p)).collect();
    let masks: Vec<(&str, &sparse_tune::param::Mask)> = names
        .iter()
        .map(String::as_str)
        .zip(arts.iter().map(|a| &a.mask))
        .collect();
    let matrix = overlap_matrix(&masks)?;
    let maskable = ctx.cfg.language.policy.maskable(model.groups()).count();
    let k = arts.first().map(|a| a.mask.count()).unwrap_or(0);
    ctx.rec.metrics.insert(
        "random_baseline".into(),
        expected_random_overlap(k, maskable),
    );
    if let Some(m) = matrix.off_diagonal_mean() {
        ctx.rec.metrics.insert("off_diagonal_mean".into(), m);
    }
    let tsv = matrix.to_tsv();
    ctx.rec.write(&ctx.run.metrics("overlap"), tsv.as_bytes())?;
    emit(&tsv);
    ctx.finish("overlap")
}

fn inspect(mut ctx: Ctx, a: &Inspect) -> Result<(), CliError> {
    let bytes = ctx.rec.read(&a.sft)?;
    let c = deserialize_diff(&bytes)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        path: String,
        fingerprint: String,
        entries: usize,
        total_params: usize,
        density: f64,
        tensors: Vec<(&'a str, usize)>,
        metadata: &'a sparse_tune::param::Metadata,
    }
    let layout = c.diff.layout();
    let tensors = (0..layout.len())
        .map(|t| (layout.name(t), c.diff.tensor_entries(t).0.len()))
        .filter(|(_, n)| *n > 0)
        .collect();
    let summary = Summary {
        path: a.sft.display().to_string(),
        fingerprint: c.diff.fingerprint().to_hex(),
        entries: c.diff.nnz(),
        total_params: layout.total(),
        density: c.diff.density(),
        tensors,
        metadata: &c.metadata,
    };
    let text =
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Failed(e.to_string()))?;
    emit(&format!("{text}\n"));
    ctx.rec
        .metrics
        .insert("entries".into(), c.diff.nnz() as f64);
    ctx.rec.metrics.insert("density".into(), c.diff.density());
    ctx.finish(&format!("inspect-sft-{}", stem(&a.sft)))
}
