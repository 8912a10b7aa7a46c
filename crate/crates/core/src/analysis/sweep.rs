use std::fmt::Write as _;

use rayon::prelude::*;

use super::AnalysisError;
use crate::engine::{Budget, MaskStrategy, TrainConfig};
use crate::model::TransformerModel;
use crate::param::ParameterSnapshot;
use crate::synth::{Corpus, Dataset};
use crate::transfer::{
    evaluate, train_language_sft, train_task_sft, with_final_checkpoint, zero_shot_apply,
    LanguageArtifact, Metric,
};

/// Environment variable capping sweep worker threads.
pub const THREADS_ENV: &str = "SFT_COMPOSE_THREADS";

/// Worker count from [`THREADS_ENV`], or the available parallelism when unset.
pub fn sweep_threads() -> Result<usize, AnalysisError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or(AnalysisError::Threads {
                var: THREADS_ENV,
                value: v,
            }),
        Err(_) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}

/// One language: an MLM corpus and labelled task data.
#[derive(Clone, Copy, Debug)]
pub struct SweepLanguage<'a> {
    pub corpus: &'a Corpus,
    pub data: &'a Dataset,
}

/// Everything a sweep cell trains and evaluates against.
///
/// Each cell trains language SFTs for the source and every target at the
/// cell's language density, a task SFT on the source at the task density,
/// then scores `base + φ_T + φ_L(target)` on each target's data.
#[derive(Clone, Debug)]
pub struct SweepSuite<'a> {
    pub model: &'a TransformerModel,
    pub base: &'a ParameterSnapshot,
    pub source: SweepLanguage<'a>,
    pub targets: Vec<SweepLanguage<'a>>,
    pub language_config: TrainConfig,
    pub task_config: TrainConfig,
    pub metric: Metric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub task_density: f64,
    pub lang_density: f64,
    pub seed: u64,
    /// Mean over targets, or the failure message.
    pub metric: Result<f64, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Ordered by task density, then language density, then seed.
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    /// Mean over the seeds that succeeded; `None` if all failed.
    pub fn mean(&self, task_density: f64, lang_density: f64) -> Option<f64> {
        let ok: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.task_density == task_density && c.lang_density == lang_density)
            .filter_map(|c| c.metric.as_ref().ok().copied())
            .collect();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(|c| c.metric.is_err())
    }

    /// `task_density lang_density seed metric`, failed cells as `failed`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("task_density\tlang_density\tseed\tmetric\n");
        for c in &self.cells {
            write!(s, "{}\t{}\t{}\t", c.task_density, c.lang_density, c.seed)
                .expect("write to string");
            match &c.metric {
                Ok(v) => writeln!(s, "{v}"),
                Err(_) => writeln!(s, "failed"),
            }
            .expect("write to string");
        }
        s
    }
}

fn check_levels(levels: &[f64]) -> Result<(), AnalysisError> {
    if levels.is_empty() {
        return Err(AnalysisError::Levels("no levels".into()));
    }
    if let Some(bad) = levels.iter().find(|&&d| !(d > 0.0 && d <= 1.0)) {
        return Err(AnalysisError::Levels(format!("{bad} is outside (0, 1]")));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AnalysisError::Levels(
            "levels must be strictly increasing".into(),
        ));
    }
    Ok(())
}

fn at_density(cfg: &TrainConfig, density: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        budget: Budget::Fraction(density),
        seed,
        ..with_final_checkpoint(cfg)
    }
}

/// Trains and scores every `(task density, language density, seed)` cell.
///
/// Cells run in parallel on at most [`sweep_threads`] workers; results are
/// joined in key order so the grid is identical for any thread count. A
/// failing cell is recorded and the sweep continues.
pub fn density_sweep(
    levels: &[f64],
    suite: &SweepSuite<'_>,
    seeds: &[u64],
) -> Result<SweepGrid, AnalysisError> {
    check_levels(levels)?;
    if seeds.is_empty() {
        return Err(AnalysisError::Config("no seeds".into()));
    }
    if (1..seeds.len()).any(|i| seeds[..i].contains(&seeds[i])) {
        return Err(AnalysisError::Config("duplicate seeds".into()));
    }
    if suite.targets.is_empty() {
        return Err(AnalysisError::Config("no target languages".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads()?)
        .build()
        .map_err(|e| AnalysisError::Config(e.to_string()))?;

    let langs: Vec<SweepLanguage<'_>> = std::iter::once(suite.source)
        .chain(suite.targets.iter().copied())
        .collect();
    let n_langs = langs.len();
    let lang_jobs: Vec<(f64, u64, usize)> = levels
        .iter()
        .flat_map(|&d| {
            seeds
                .iter()
                .flat_map(move |&s| (0..n_langs).map(move |l| (d, s, l)))
        })
        .collect();
    let trained: Vec<Result<LanguageArtifact, String>> = pool.install(|| {
        lang_jobs
            .par_iter()
            .map(|&(d, s, l)| {
                let cfg = at_density(&suite.language_config, d, s);
                train_language_sft(
                    suite.model,
                    suite.base,
                    langs[l].corpus,
                    None,
                    &cfg,
                    MaskStrategy::LotteryTicket,
                )
                .map_err(|e| format!("language {}: {e}", langs[l].corpus.language))
            })
            .collect()
    });
    let lang_sft = |d: usize, s: usize, l: usize| &trained[(d * seeds.len() + s) * n_langs + l];

    let cell_jobs: Vec<(usize, usize, usize)> = (0..levels.len())
        .flat_map(|t| (0..levels.len()).flat_map(move |d| (0..seeds.len()).map(move |s| (t, d, s))))
        .collect();
    let cells = pool.install(|| {
        cell_jobs
            .par_iter()
            .map(|&(t, d, s)| {
                let metric = (|| {
                    let source = lang_sft(d, s, 0).as_ref().map_err(Clone::clone)?;
                    let cfg = at_density(&suite.task_config, levels[t], seeds[s]);
                    let task = train_task_sft(
                        suite.model,
                        suite.base,
                        suite.source.data,
                        None,
                        Some(source),
                        &cfg,
                        MaskStrategy::LotteryTicket,
                    )
                    .map_err(|e| format!("task: {e}"))?;
                    let mut sum = 0.0;
                    for (l, target) in langs.iter().enumerate().skip(1) {
                        let phi_l = lang_sft(d, s, l).as_ref().map_err(Clone::clone)?;
                        let params = zero_shot_apply(suite.base, &task, Some(phi_l))
                            .map_err(|e| e.to_string())?;
                        sum += evaluate(
                            suite.model,
                            &params,
                            &task.head_spec,
                            &task.head,
                            target.data,
                            suite.metric,
                        )
                        .map_err(|e| format!("eval {}: {e}", target.data.language))?;
                    }
                    Ok(sum / (langs.len() - 1) as f64)
                })();
                SweepCell {
                    task_density: levels[t],
                    lang_density: levels[d],
                    seed: seeds[s],
                    metric,
                }
            })
            .collect()
    });
    Ok(SweepGrid {
        levels: levels.to_vec(),
        seeds: seeds.to_vec(),
        cells,
    })
}
