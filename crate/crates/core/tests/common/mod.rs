#![allow(dead_code)]

pub mod ops;

use std::sync::Arc;

use sparse_tune::engine::{EngineError, LossGrad, Objective, TrainConfig};
use sparse_tune::model::{ModelSpec, TransformerModel};
use sparse_tune::param::{GroupTag, Layout, ParameterGroups, ParameterSnapshot};
use sparse_tune::synth::{LanguageSpec, SuiteConfig, WordOrder};

/// One-layer encoder small enough for many training runs per test.
pub fn tiny_spec(vocab_size: usize) -> ModelSpec {
    ModelSpec {
        vocab_size,
        hidden_size: 16,
        layers: 1,
        heads: 2,
        ffn_size: 16,
        max_seq_len: 32,
        tie_output_embedding: false,
    }
}

pub fn tiny_model() -> TransformerModel {
    TransformerModel::new(tiny_spec(64)).unwrap()
}

/// Two languages with a handful of words each, no shared vocabulary.
pub fn small_suite(vocab_size: usize) -> Vec<LanguageSpec> {
    SuiteConfig {
        languages: vec![
            ("a".into(), WordOrder::Svo, true),
            ("b".into(), WordOrder::Sov, false),
        ],
        words_per_category: [6, 4, 3, 2],
        shared_fraction: 0.0,
        zipf_exponent: 1.0,
        seed: 3,
    }
    .build(vocab_size)
    .unwrap()
}

/// `L = Σ a_i (θ_i − c_i)² / 2 + Σ g_i θ_i` over tensors tagged by `tags`.
#[derive(Debug)]
pub struct Quadratic {
    pub layout: Arc<Layout>,
    pub groups: ParameterGroups,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub g: Vec<f64>,
}

impl Quadratic {
    pub fn new(
        layout: Arc<Layout>,
        tags: Vec<GroupTag>,
        a: Vec<f64>,
        c: Vec<f64>,
        g: Vec<f64>,
    ) -> Self {
        let groups = ParameterGroups::new(layout.clone(), tags).unwrap();
        Quadratic {
            layout,
            groups,
            a,
            c,
            g,
        }
    }
}

impl Objective for Quadratic {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn groups(&self) -> &ParameterGroups {
        &self.groups
    }

    fn init_head(&self, _seed: u64) -> Result<Option<ParameterSnapshot>, EngineError> {
        Ok(None)
    }

    fn loss_grad(
        &self,
        body: &ParameterSnapshot,
        _head: Option<&ParameterSnapshot>,
        _step: usize,
        _cfg: &TrainConfig,
    ) -> Result<LossGrad, EngineError> {
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(self.a.len());
        for (i, &x) in body.values().iter().enumerate() {
            let d = x as f64 - self.c[i];
            loss += 0.5 * self.a[i] * d * d + self.g[i] * x as f64;
            grad.push(self.a[i] * d + self.g[i]);
        }
        Ok(LossGrad {
            loss,
            body: grad,
            head: None,
        })
    }
}
