//! Toy languages built from four universal word categories.
//!
//! Each language owns a vocabulary per category (mostly disjoint from other
//! languages), a clause word order, a modifier position and a Zipf token
//! frequency profile. Two tasks are derived from the grammar: per-token
//! category tagging and sequence-level grammaticality detection.

mod grammar;
mod io;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Batch, Labels, CLS, FIRST_REGULAR};
use crate::numeric::CounterRng;

pub use grammar::is_grammatical;
pub use io::{read_corpus, read_dataset, write_corpus, write_dataset};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("vocabulary overflow: need {needed} ids, model vocabulary has {available}")]
    VocabularyOverflow { needed: usize, available: usize },
    #[error("invalid specification: {0}")]
    Spec(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Noun,
    Verb,
    Modifier,
    Function,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Noun,
        Category::Verb,
        Category::Modifier,
        Category::Function,
    ];

    pub fn label(&self) -> u32 {
        *self as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WordOrder {
    Svo,
    Sov,
    Vso,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Per-token label = universal category.
    CategoryTagging,
    /// Sequence label 1 when the sentence follows the language's grammar.
    AgreementDetection,
}

impl TaskKind {
    pub fn classes(&self) -> usize {
        match self {
            TaskKind::CategoryTagging => Category::ALL.len(),
            TaskKind::AgreementDetection => 2,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::CategoryTagging => "tagging",
            TaskKind::AgreementDetection => "agreement",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tagging" | "category-tagging" => Ok(TaskKind::CategoryTagging),
            "agreement" | "agreement-detection" => Ok(TaskKind::AgreementDetection),
            other => Err(SynthError::Spec(format!("unknown task {:?}", other))),
        }
    }
}

/// One toy language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub tag: String,
    /// Token ids per category, in frequency-rank order; indexed by `Category as usize`.
    pub vocab: [Vec<u32>; 4],
    pub order: WordOrder,
    pub modifier_before_noun: bool,
    /// Zipf exponent of the within-category rank distribution.
    pub zipf_exponent: f64,
    /// Exclusive bound every id must respect.
    pub vocab_limit: u32,
    pub seed: u64,
}

/// Sentence length bounds implied by the grammar, in tokens.
pub const MIN_SENTENCE_LEN: usize = 3;
pub const MAX_SENTENCE_LEN: usize = 15;

const P_DETERMINER: f64 = 0.5;
const P_MODIFIER: f64 = 0.4;
const P_SECOND_CLAUSE: f64 = 0.3;

impl LanguageSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (c, words) in Category::ALL.iter().zip(&self.vocab) {
            if words.is_empty() {
                return Err(SynthError::Spec(format!("{}: no {:?} words", self.tag, c)));
            }
        }
        let max = self.vocab.iter().flatten().max().copied().unwrap_or(0);
        if max >= self.vocab_limit {
            return Err(SynthError::VocabularyOverflow {
                needed: max as usize + 1,
                available: self.vocab_limit as usize,
            });
        }
        if self.vocab.iter().flatten().any(|&t| t < FIRST_REGULAR) {
            return Err(SynthError::Spec(
                "vocabulary overlaps special tokens".into(),
            ));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(SynthError::Spec(
                "zipf exponent must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Same language with an independent random stream.
    pub fn reseeded(&self, salt: u64) -> LanguageSpec {
        LanguageSpec {
            seed: CounterRng::new(self.seed).u64(salt),
            ..self.clone()
        }
    }

    /// Category of `token` in this language.
    pub fn category_of(&self, token: u32) -> Option<Category> {
        Category::ALL
            .into_iter()
            .find(|c| self.vocab[*c as usize].contains(&token))
    }

    /// Within-category probability of each word, rank order.
    pub fn zipf_weights(&self, category: Category) -> Vec<f64> {
        let n = self.vocab[category as usize].len();
        let raw: Vec<f64> = (0..n)
            .map(|r| 1.0 / ((r + 1) as f64).powf(self.zipf_exponent))
            .collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / z).collect()
    }
}

/// Token ids with their category, as drawn from the grammar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<u32>,
    pub categories: Vec<Category>,
}

struct Sampler<'a> {
    spec: &'a LanguageSpec,
    pickers: Vec<WeightedIndex<f64>>,
    rng: ChaCha8Rng,
}

impl<'a> Sampler<'a> {
    fn new(spec: &'a LanguageSpec, seed: u64) -> Result<Self, SynthError> {
        spec.validate()?;
        let pickers = Category::ALL
            .iter()
            .map(|c| {
                WeightedIndex::new(spec.zipf_weights(*c))
                    .map_err(|e| SynthError::Spec(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Sampler {
            spec,
            pickers,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn word(&mut self, c: Category, out: &mut Sentence) {
        let r = self.pickers[c as usize].sample(&mut self.rng);
        out.tokens.push(self.spec.vocab[c as usize][r]);
        out.categories.push(c);
    }

    fn noun_phrase(&mut self, out: &mut Sentence) {
        if self.rng.random_bool(P_DETERMINER) {
            self.word(Category::Function, out);
        }
        let modified = self.rng.random_bool(P_MODIFIER);
        if modified && self.spec.modifier_before_noun {
            self.word(Category::Modifier, out);
        }
        self.word(Category::Noun, out);
        if modified && !self.spec.modifier_before_noun {
            self.word(Category::Modifier, out);
        }
    }

    fn clause(&mut self, out: &mut Sentence) {
        match self.spec.order {
            WordOrder::Svo => {
                self.noun_phrase(out);
                self.word(Category::Verb, out);
                self.noun_phrase(out);
            }
            WordOrder::Sov => {
                self.noun_phrase(out);
                self.noun_phrase(out);
                self.word(Category::Verb, out);
            }
            WordOrder::Vso => {
                self.word(Category::Verb, out);
                self.noun_phrase(out);
                self.noun_phrase(out);
            }
        }
    }

    fn sentence(&mut self) -> Sentence {
        let mut s = Sentence {
            tokens: Vec::new(),
            categories: Vec::new(),
        };
        self.clause(&mut s);
        if self.rng.random_bool(P_SECOND_CLAUSE) {
            self.word(Category::Function, &mut s);
            self.clause(&mut s);
        }
        s
    }
}

/// `count` grammatical sentences; a pure function of `(spec, count)`.
pub fn generate_sentences(spec: &LanguageSpec, count: usize) -> Result<Vec<Sentence>, SynthError> {
    if count == 0 {
        return Err(SynthError::Spec("sentence count must be positive".into()));
    }
    let mut s = Sampler::new(spec, spec.seed)?;
    Ok((0..count).map(|_| s.sentence()).collect())
}

/// Monolingual token-id corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub language: String,
    pub sentences: Vec<Vec<u32>>,
}

impl Corpus {
    /// Consecutive chunks of `batch_size` sentences with `[CLS]` prepended.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        self.sentences
            .chunks(batch_size.max(1))
            .map(|chunk| {
                let seqs = chunk.iter().map(|s| with_cls(s)).collect();
                Batch::from_sequences(seqs, Labels::None, Some(self.language.clone()))
            })
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

pub fn generate_corpus(spec: &LanguageSpec, sentences: usize) -> Result<Corpus, SynthError> {
    Ok(Corpus {
        language: spec.tag.clone(),
        sentences: generate_sentences(spec, sentences)?
            .into_iter()
            .map(|s| s.tokens)
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExampleLabel {
    Tokens(Vec<u32>),
    Sequence(u32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: ExampleLabel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub language: String,
    pub task: TaskKind,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Batches with `[CLS]` prepended; the `[CLS]` position carries no token label.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        self.examples
            .chunks(batch_size.max(1))
            .map(|chunk| {
                let seqs = chunk.iter().map(|e| with_cls(&e.tokens)).collect();
                let labels = match self.task {
                    TaskKind::CategoryTagging => Labels::Tokens(
                        chunk
                            .iter()
                            .map(|e| match &e.label {
                                ExampleLabel::Tokens(l) => std::iter::once(None)
                                    .chain(l.iter().map(|&x| Some(x)))
                                    .collect(),
                                ExampleLabel::Sequence(_) => vec![None; e.tokens.len() + 1],
                            })
                            .collect(),
                    ),
                    TaskKind::AgreementDetection => Labels::Sequence(
                        chunk
                            .iter()
                            .map(|e| match e.label {
                                ExampleLabel::Sequence(l) => l,
                                ExampleLabel::Tokens(_) => 0,
                            })
                            .collect(),
                    ),
                };
                Batch::from_sequences(seqs, labels, Some(self.language.clone()))
            })
            .collect()
    }

    /// At most `cap` examples, keeping the original order.
    pub fn capped(&self, cap: usize) -> Dataset {
        Dataset {
            examples: self.examples.iter().take(cap).cloned().collect(),
            ..self.clone()
        }
    }
}

fn with_cls(tokens: &[u32]) -> Vec<u32> {
    let mut s = Vec::with_capacity(tokens.len() + 1);
    s.push(CLS);
    s.extend_from_slice(tokens);
    s
}

/// Labelled examples drawn from the grammar.
///
/// Agreement negatives are grammatical sentences perturbed by token swaps
/// until the recognizer rejects them; labels are balanced by a fair coin.
pub fn generate_task_data(
    spec: &LanguageSpec,
    task: TaskKind,
    examples: usize,
) -> Result<Dataset, SynthError> {
    if examples == 0 {
        return Err(SynthError::Spec("example count must be positive".into()));
    }
    let mut sampler = Sampler::new(spec, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(CounterRng::new(spec.seed).u64(0x7461_736b));
    let mut out = Vec::with_capacity(examples);
    while out.len() < examples {
        let s = sampler.sentence();
        match task {
            TaskKind::CategoryTagging => out.push(Example {
                label: ExampleLabel::Tokens(s.categories.iter().map(Category::label).collect()),
                tokens: s.tokens,
            }),
            TaskKind::AgreementDetection => {
                if rng.random_bool(0.5) {
                    out.push(Example {
                        tokens: s.tokens,
                        label: ExampleLabel::Sequence(1),
                    });
                } else if let Some(bad) = perturb(spec, &s, &mut rng) {
                    out.push(Example {
                        tokens: bad,
                        label: ExampleLabel::Sequence(0),
                    });
                }
            }
        }
    }
    Ok(Dataset {
        language: spec.tag.clone(),
        task,
        examples: out,
    })
}

fn perturb(spec: &LanguageSpec, s: &Sentence, rng: &mut ChaCha8Rng) -> Option<Vec<u32>> {
    let n = s.tokens.len();
    for _ in 0..32 {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if s.categories[i] == s.categories[j] {
            continue;
        }
        let mut cats = s.categories.clone();
        cats.swap(i, j);
        if !grammar::accepts(spec, &cats) {
            let mut t = s.tokens.clone();
            t.swap(i, j);
            return Some(t);
        }
    }
    None
}

/// Layout of a generated language suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// `(tag, word order, modifier before noun)` per language.
    pub languages: Vec<(String, WordOrder, bool)>,
    /// Words per category per language, `Category` order.
    pub words_per_category: [usize; 4],
    /// Fraction of every language's words drawn from a pool common to all.
    pub shared_fraction: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    /// Four source-capable and four target languages, 10% shared words.
    fn default() -> Self {
        use WordOrder::*;
        let langs = [
            ("src0", Svo, true),
            ("src1", Sov, false),
            ("src2", Vso, true),
            ("src3", Svo, false),
            ("tgt0", Sov, true),
            ("tgt1", Vso, false),
            ("tgt2", Svo, true),
            ("tgt3", Sov, false),
        ];
        SuiteConfig {
            languages: langs
                .iter()
                .map(|(t, o, m)| (t.to_string(), *o, *m))
                .collect(),
            words_per_category: [20, 12, 10, 6],
            shared_fraction: 0.1,
            zipf_exponent: 1.0,
            seed: 7,
        }
    }
}

impl SuiteConfig {
    /// Assigns ids: shared pools first, then each language's own words.
    pub fn build(&self, vocab_size: usize) -> Result<Vec<LanguageSpec>, SynthError> {
        if self.languages.is_empty() {
            return Err(SynthError::Spec("suite needs at least one language".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(SynthError::Spec(format!(
                "shared fraction {} outside [0, 1]",
                self.shared_fraction
            )));
        }
        let shared: Vec<usize> = self
            .words_per_category
            .iter()
            .map(|&n| {
                let s = (self.shared_fraction * n as f64).round() as usize;
                if self.shared_fraction > 0.0 {
                    s.max(1).min(n)
                } else {
                    0
                }
            })
            .collect();
        let needed = FIRST_REGULAR as usize
            + shared.iter().sum::<usize>()
            + self.languages.len()
                * self
                    .words_per_category
                    .iter()
                    .zip(&shared)
                    .map(|(n, s)| n - s)
                    .sum::<usize>();
        if needed > vocab_size {
            return Err(SynthError::VocabularyOverflow {
                needed,
                available: vocab_size,
            });
        }
        let mut next = FIRST_REGULAR;
        let mut take = |k: usize| {
            let ids: Vec<u32> = (next..next + k as u32).collect();
            next += k as u32;
            ids
        };
        let pools: Vec<Vec<u32>> = shared.iter().map(|&s| take(s)).collect();
        let mut out = Vec::with_capacity(self.languages.len());
        for (li, (tag, order, before)) in self.languages.iter().enumerate() {
            let seed = CounterRng::new(self.seed).u64(li as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vocab: [Vec<u32>; 4] = std::array::from_fn(|c| {
                let mut words = pools[c].clone();
                words.extend(take(self.words_per_category[c] - shared[c]));
                words.shuffle(&mut rng);
                words
            });
            out.push(LanguageSpec {
                tag: tag.clone(),
                vocab,
                order: *order,
                modifier_before_noun: *before,
                zipf_exponent: self.zipf_exponent,
                vocab_limit: vocab_size as u32,
                seed,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use std::collections::{BTreeMap, BTreeSet};

    fn suite(shared: f64) -> Vec<LanguageSpec> {
        SuiteConfig {
            shared_fraction: shared,
            ..SuiteConfig::default()
        }
        .build(512)
        .unwrap()
    }

    #[test]
    fn same_spec_same_corpus() {
        let s = &suite(0.1)[0];
        assert_eq!(
            generate_corpus(s, 50).unwrap(),
            generate_corpus(s, 50).unwrap()
        );
        assert_ne!(
            generate_corpus(s, 50).unwrap(),
            generate_corpus(&s.reseeded(1), 50).unwrap()
        );
    }

    #[test]
    fn disjoint_without_sharing() {
        let langs = suite(0.0);
        let a: BTreeSet<u32> = generate_corpus(&langs[0], 500)
            .unwrap()
            .sentences
            .concat()
            .into_iter()
            .collect();
        let b: BTreeSet<u32> = generate_corpus(&langs[1], 500)
            .unwrap()
            .sentences
            .concat()
            .into_iter()
            .collect();
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn every_token_has_one_category() {
        for l in suite(0.1) {
            let all: Vec<u32> = l.vocab.iter().flatten().copied().collect();
            let set: BTreeSet<u32> = all.iter().copied().collect();
            assert_eq!(all.len(), set.len());
        }
    }

    #[test]
    fn lengths_within_bounds_and_grammatical() {
        let l = &suite(0.1)[2];
        for s in generate_sentences(l, 500).unwrap() {
            assert!((MIN_SENTENCE_LEN..=MAX_SENTENCE_LEN).contains(&s.tokens.len()));
            assert!(is_grammatical(l, &s.tokens));
        }
    }

    #[test]
    fn overflow_is_reported() {
        let err = SuiteConfig::default().build(64).unwrap_err();
        assert!(matches!(err, SynthError::VocabularyOverflow { .. }));
    }

    #[test]
    fn within_category_frequencies_follow_zipf() {
        // χ² goodness of fit per category against the rank profile
        let l = &suite(0.1)[0];
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        let mut total = 0;
        let mut n = 0;
        while total < 50_000 {
            n += 2000;
            let c = generate_corpus(l, n).unwrap();
            total = c.token_count();
            counts.clear();
            for t in c.sentences.concat() {
                *counts.entry(t).or_default() += 1;
            }
        }
        for cat in Category::ALL {
            let words = &l.vocab[cat as usize];
            let observed: Vec<f64> = words
                .iter()
                .map(|w| *counts.get(w).unwrap_or(&0) as f64)
                .collect();
            let m: f64 = observed.iter().sum();
            let expected: Vec<f64> = l.zipf_weights(cat).into_iter().map(|p| p * m).collect();
            let stat: f64 = observed
                .iter()
                .zip(&expected)
                .map(|(o, e)| (o - e).powi(2) / e)
                .sum();
            let df = (words.len() - 1) as f64;
            let critical = ChiSquared::new(df).unwrap().inverse_cdf(0.99);
            assert!(
                stat < critical,
                "{:?}: χ²={} critical={}",
                cat,
                stat,
                critical
            );
        }
    }

    #[test]
    fn tagging_labels_are_categories() {
        let l = &suite(0.1)[1];
        let d = generate_task_data(l, TaskKind::CategoryTagging, 200).unwrap();
        for e in &d.examples {
            let ExampleLabel::Tokens(labels) = &e.label else {
                panic!()
            };
            for (t, lab) in e.tokens.iter().zip(labels) {
                assert_eq!(l.category_of(*t).unwrap().label(), *lab);
            }
        }
        assert_eq!(
            d,
            generate_task_data(l, TaskKind::CategoryTagging, 200).unwrap()
        );
    }

    #[test]
    fn agreement_is_balanced_and_consistent() {
        let l = &suite(0.1)[4];
        let d = generate_task_data(l, TaskKind::AgreementDetection, 10_000).unwrap();
        let pos = d
            .examples
            .iter()
            .filter(|e| e.label == ExampleLabel::Sequence(1))
            .count() as f64
            / 10_000.0;
        assert!((pos - 0.5).abs() <= 0.02, "{}", pos);
        for e in d.examples.iter().take(2000) {
            let ok = is_grammatical(l, &e.tokens);
            assert_eq!(e.label, ExampleLabel::Sequence(ok as u32));
        }
    }

    #[test]
    fn batches_prepend_cls() {
        let l = &suite(0.1)[0];
        let d = generate_task_data(l, TaskKind::CategoryTagging, 5).unwrap();
        let b = &d.batches(4)[0];
        assert_eq!(b.len(), 4);
        assert!(b.ids.iter().all(|r| r[0] == CLS));
        let Labels::Tokens(rows) = &b.labels else {
            panic!()
        };
        assert!(rows.iter().all(|r| r[0].is_none()));
        assert_eq!(d.batches(4).len(), 2);
    }
}
