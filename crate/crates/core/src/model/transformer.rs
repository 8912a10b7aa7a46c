use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::head::INIT_STD;
use super::{group_of, Batch, HeadKind, HeadSpec, Labels, ModelError, ModelSpec};
use crate::numeric::{DropoutKey, Real, Tape, Tensor, Var};
use crate::param::{Layout, ParameterGroups, ParameterSnapshot};

/// Dropout settings for one forward pass; `dropout == 0` is evaluation mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub dropout: f64,
    pub seed: u64,
    pub step: u64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            dropout: 0.0,
            seed: 0,
            step: 0,
        }
    }
}

/// Loss with gradients aligned to the body and head layouts.
#[derive(Clone, Debug)]
pub struct LossAndGrad {
    pub loss: f64,
    pub body: Vec<f64>,
    pub head: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    /// Predicted class at every real position; `None` on padding.
    Tokens(Vec<Vec<Option<u32>>>),
    Sequence(Vec<u32>),
}

/// Borrowed head parameters in compute precision.
struct HeadView<'a, T> {
    spec: &'a HeadSpec,
    layout: &'a Layout,
    values: &'a [T],
}

/// Post-LN transformer encoder over unpadded sequences.
#[derive(Clone, Debug)]
pub struct TransformerModel {
    spec: ModelSpec,
    layout: Arc<Layout>,
    groups: ParameterGroups,
}

impl TransformerModel {
    pub fn new(spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let layout = Layout::new(spec.parameter_shapes())?;
        let groups = ParameterGroups::from_fn(layout.clone(), group_of);
        Ok(TransformerModel {
            spec,
            layout,
            groups,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn groups(&self) -> &ParameterGroups {
        &self.groups
    }

    /// Weights `N(0, 0.02²)`, zero biases, unit layer-norm gains.
    pub fn init(&self, seed: u64) -> ParameterSnapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut values = Vec::with_capacity(self.layout.total());
        for t in 0..self.layout.len() {
            let name = self.layout.name(t);
            let n = self.layout.size(t);
            if name.ends_with(".gamma") {
                values.extend(std::iter::repeat_n(1.0f32, n));
            } else if name.ends_with(".beta") || name.ends_with(".bias") {
                values.extend(std::iter::repeat_n(0.0f32, n));
            } else {
                values.extend((0..n).map(|_| normal.sample(&mut rng) as f32));
            }
        }
        ParameterSnapshot::from_flat(self.layout.clone(), values).expect("layout-sized values")
    }

    /// Loss and gradients in f32 arithmetic.
    ///
    /// Without a head the objective is MLM and `batch.labels` must be token
    /// labels holding vocabulary ids.
    pub fn forward_loss(
        &self,
        params: &ParameterSnapshot,
        head: Option<(&HeadSpec, &ParameterSnapshot)>,
        batch: &Batch,
        opts: &ForwardOptions,
    ) -> Result<LossAndGrad, ModelError> {
        params.ensure_matches(self.layout.fingerprint())?;
        let head = head.map(|(spec, p)| (spec, p.layout().as_ref(), p.values()));
        self.forward_loss_flat::<f32>(params.values(), head, batch, opts)
    }

    /// Same as [`forward_loss`](Self::forward_loss) over flat values of any
    /// precision; used by gradient checks in f64.
    pub fn forward_loss_flat<T: Real>(
        &self,
        body: &[T],
        head: Option<(&HeadSpec, &Layout, &[T])>,
        batch: &Batch,
        opts: &ForwardOptions,
    ) -> Result<LossAndGrad, ModelError> {
        let head = head.map(|(spec, layout, values)| HeadView {
            spec,
            layout,
            values,
        });
        let (tape, loss, body_vars, head_vars) =
            self.build_loss(body, head.as_ref(), batch, opts)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        let grads = tape.backward(loss)?;
        let mut body_grad = vec![0.0; self.layout.total()];
        for (t, v) in body_vars.iter().enumerate() {
            if let Some(g) = grads.get(*v) {
                body_grad[self.layout.range(t)].copy_from_slice(g);
            }
        }
        let head_grad = head.map(|h| {
            let mut out = vec![0.0; h.layout.total()];
            for (t, v) in head_vars.iter().enumerate() {
                if let Some(g) = grads.get(*v) {
                    out[h.layout.range(t)].copy_from_slice(g);
                }
            }
            out
        });
        Ok(LossAndGrad {
            loss: value,
            body: body_grad,
            head: head_grad,
        })
    }

    /// Loss only, in evaluation mode.
    pub fn loss(
        &self,
        params: &ParameterSnapshot,
        head: Option<(&HeadSpec, &ParameterSnapshot)>,
        batch: &Batch,
    ) -> Result<f64, ModelError> {
        params.ensure_matches(self.layout.fingerprint())?;
        let view = head.map(|(spec, p)| HeadView {
            spec,
            layout: p.layout().as_ref(),
            values: p.values(),
        });
        let (tape, loss, _, _) = self.build_loss(
            params.values(),
            view.as_ref(),
            batch,
            &ForwardOptions::eval(),
        )?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        Ok(value)
    }

    /// Argmax predictions of a task head in evaluation mode.
    pub fn predict(
        &self,
        params: &ParameterSnapshot,
        head_spec: &HeadSpec,
        head: &ParameterSnapshot,
        batch: &Batch,
    ) -> Result<Predictions, ModelError> {
        params.ensure_matches(self.layout.fingerprint())?;
        batch.validate(self.spec.vocab_size, self.spec.max_seq_len)?;
        let view = HeadView {
            spec: head_spec,
            layout: head.layout().as_ref(),
            values: head.values(),
        };
        let mut tape = Tape::<f32>::new();
        let body_vars = self.leaves(&mut tape, &self.layout, params.values())?;
        let head_vars = self.leaves(&mut tape, view.layout, view.values)?;
        let encoded = self.encode(&mut tape, &body_vars, batch, &ForwardOptions::eval())?;
        let offsets = row_offsets(batch);
        match head_spec.kind {
            HeadKind::TokenClassification => {
                let logits = self.token_logits(&mut tape, &view, &head_vars, encoded)?;
                let classes = argmax_rows(tape.value(logits));
                let width = batch.ids.first().map_or(0, Vec::len);
                let out = (0..batch.len())
                    .map(|b| {
                        (0..width)
                            .map(|p| (p < batch.seq_len(b)).then(|| classes[offsets[b] + p]))
                            .collect()
                    })
                    .collect();
                Ok(Predictions::Tokens(out))
            }
            HeadKind::SequenceClassification => {
                let cls = tape.gather_rows(encoded, &offsets[..batch.len()])?;
                let logits = self.sequence_logits(
                    &mut tape,
                    &view,
                    &head_vars,
                    cls,
                    &ForwardOptions::eval(),
                )?;
                Ok(Predictions::Sequence(argmax_rows(tape.value(logits))))
            }
        }
    }

    fn leaves<T: Real>(
        &self,
        tape: &mut Tape<T>,
        layout: &Layout,
        values: &[T],
    ) -> Result<Vec<Var>, ModelError> {
        if values.len() != layout.total() {
            return Err(crate::param::ParamError::LengthMismatch {
                name: "parameters".into(),
                expected: layout.total(),
                found: values.len(),
            }
            .into());
        }
        (0..layout.len())
            .map(|t| {
                let tensor =
                    Tensor::new(layout.shape(t).to_vec(), values[layout.range(t)].to_vec())?;
                Ok(tape.leaf(tensor))
            })
            .collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self.layout.index_of(name).expect("known parameter")]
    }

    #[allow(clippy::type_complexity)]
    fn build_loss<T: Real>(
        &self,
        body: &[T],
        head: Option<&HeadView<'_, T>>,
        batch: &Batch,
        opts: &ForwardOptions,
    ) -> Result<(Tape<T>, Var, Vec<Var>, Vec<Var>), ModelError> {
        batch.validate(self.spec.vocab_size, self.spec.max_seq_len)?;
        let mut tape = Tape::<T>::new();
        let body_vars = self.leaves(&mut tape, &self.layout, body)?;
        let head_vars = match head {
            Some(h) => {
                if h.spec.shapes(self.spec.hidden_size).len() != h.layout.len() {
                    return Err(ModelError::Spec(
                        "head parameters do not match head spec".into(),
                    ));
                }
                self.leaves(&mut tape, h.layout, h.values)?
            }
            None => Vec::new(),
        };
        let encoded = self.encode(&mut tape, &body_vars, batch, opts)?;
        let offsets = row_offsets(batch);
        let loss = match (head, &batch.labels) {
            (None, Labels::Tokens(labels)) => {
                let (rows, targets) = labelled_rows(batch, labels, &offsets);
                if rows.is_empty() {
                    tape.leaf(Tensor::scalar(0.0))
                } else {
                    let picked = tape.gather_rows(encoded, &rows)?;
                    let decoder = if self.spec.tie_output_embedding {
                        self.var(&body_vars, "embeddings.token")
                    } else {
                        self.var(&body_vars, "mlm.decoder.weight")
                    };
                    let logits = tape.matmul_t(picked, decoder)?;
                    let logits = tape.add_row(logits, self.var(&body_vars, "mlm.decoder.bias"))?;
                    tape.softmax_cross_entropy(logits, &targets)?
                }
            }
            (Some(h), Labels::Tokens(labels)) if h.spec.kind == HeadKind::TokenClassification => {
                let (rows, targets) = labelled_rows(batch, labels, &offsets);
                if rows.is_empty() {
                    tape.leaf(Tensor::scalar(0.0))
                } else {
                    let picked = tape.gather_rows(encoded, &rows)?;
                    let picked = tape.dropout(
                        picked,
                        opts.dropout,
                        DropoutKey {
                            seed: opts.seed,
                            step: opts.step,
                            site: "head",
                        },
                    )?;
                    let logits = self.token_logits(&mut tape, h, &head_vars, picked)?;
                    tape.softmax_cross_entropy(logits, &targets)?
                }
            }
            (Some(h), Labels::Sequence(labels))
                if h.spec.kind == HeadKind::SequenceClassification =>
            {
                let cls = tape.gather_rows(encoded, &offsets[..batch.len()])?;
                let logits = self.sequence_logits(&mut tape, h, &head_vars, cls, opts)?;
                let targets: Vec<Option<usize>> =
                    labels.iter().map(|&l| Some(l as usize)).collect();
                tape.softmax_cross_entropy(logits, &targets)?
            }
            _ => {
                return Err(ModelError::Batch(
                    "labels do not match the training objective".into(),
                ))
            }
        };
        Ok((tape, loss, body_vars, head_vars))
    }

    fn token_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        head: &HeadView<'_, T>,
        vars: &[Var],
        x: Var,
    ) -> Result<Var, ModelError> {
        let w = vars[head
            .layout
            .index_of("head.classifier.weight")
            .expect("head weight")];
        let b = vars[head
            .layout
            .index_of("head.classifier.bias")
            .expect("head bias")];
        let logits = tape.matmul(x, w)?;
        Ok(tape.add_row(logits, b)?)
    }

    fn sequence_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        head: &HeadView<'_, T>,
        vars: &[Var],
        cls: Var,
        opts: &ForwardOptions,
    ) -> Result<Var, ModelError> {
        let dw = vars[head
            .layout
            .index_of("head.dense.weight")
            .expect("dense weight")];
        let db = vars[head.layout.index_of("head.dense.bias").expect("dense bias")];
        let h = tape.matmul(cls, dw)?;
        let h = tape.add_row(h, db)?;
        let h = tape.gelu(h)?;
        let h = tape.dropout(
            h,
            opts.dropout,
            DropoutKey {
                seed: opts.seed,
                step: opts.step,
                site: "head",
            },
        )?;
        self.token_logits(tape, head, vars, h)
    }

    /// Final hidden states of every real token, sequences stacked row-wise.
    fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        batch: &Batch,
        opts: &ForwardOptions,
    ) -> Result<Var, ModelError> {
        let lens: Vec<usize> = (0..batch.len()).map(|b| batch.seq_len(b)).collect();
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for (b, &len) in lens.iter().enumerate() {
            ids.extend(batch.ids[b][..len].iter().map(|&i| i as usize));
            positions.extend(0..len);
        }
        let drop = |tape: &mut Tape<T>, x: Var, site: &str| {
            tape.dropout(
                x,
                opts.dropout,
                DropoutKey {
                    seed: opts.seed,
                    step: opts.step,
                    site,
                },
            )
        };
        let tok = tape.embedding_lookup(self.var(vars, "embeddings.token"), &ids)?;
        let pos = tape.embedding_lookup(self.var(vars, "embeddings.position"), &positions)?;
        let x = tape.add(tok, pos)?;
        let x = tape.layer_norm(
            x,
            self.var(vars, "embeddings.norm.gamma"),
            self.var(vars, "embeddings.norm.beta"),
        )?;
        let mut x = drop(tape, x, "embeddings")?;

        let h = self.spec.hidden_size;
        let d = h / self.spec.heads;
        let scale = 1.0 / (d as f64).sqrt();
        for l in 0..self.spec.layers {
            let p = format!("layer{}", l);
            let proj = |tape: &mut Tape<T>, x: Var, name: &str| -> Result<Var, ModelError> {
                let y = tape.matmul(x, self.var(vars, &format!("{p}.{name}.weight")))?;
                Ok(tape.add_row(y, self.var(vars, &format!("{p}.{name}.bias")))?)
            };
            let q = proj(tape, x, "attention.query")?;
            let k = proj(tape, x, "attention.key")?;
            let v = proj(tape, x, "attention.value")?;
            let mut seqs = Vec::with_capacity(lens.len());
            let mut start = 0;
            for &len in &lens {
                let rows = start..start + len;
                let mut heads = Vec::with_capacity(self.spec.heads);
                for hd in 0..self.spec.heads {
                    let cols = hd * d..(hd + 1) * d;
                    let qs = tape.slice(q, rows.clone(), cols.clone())?;
                    let ks = tape.slice(k, rows.clone(), cols.clone())?;
                    let vs = tape.slice(v, rows.clone(), cols)?;
                    let scores = tape.matmul_t(qs, ks)?;
                    let scores = tape.scale(scores, scale)?;
                    let probs = tape.softmax_rows(scores)?;
                    heads.push(tape.matmul(probs, vs)?);
                }
                seqs.push(if heads.len() == 1 {
                    heads[0]
                } else {
                    tape.concat_cols(&heads)?
                });
                start += len;
            }
            let ctx = if seqs.len() == 1 {
                seqs[0]
            } else {
                tape.concat_rows(&seqs)?
            };
            let attn = proj(tape, ctx, "attention.output")?;
            let attn = drop(tape, attn, &format!("{p}.attention"))?;
            let res = tape.add(x, attn)?;
            x = tape.layer_norm(
                res,
                self.var(vars, &format!("{p}.attention.norm.gamma")),
                self.var(vars, &format!("{p}.attention.norm.beta")),
            )?;
            let up = proj(tape, x, "ffn.up")?;
            let up = tape.gelu(up)?;
            let down = proj(tape, up, "ffn.down")?;
            let down = drop(tape, down, &format!("{p}.ffn"))?;
            let res = tape.add(x, down)?;
            x = tape.layer_norm(
                res,
                self.var(vars, &format!("{p}.ffn.norm.gamma")),
                self.var(vars, &format!("{p}.ffn.norm.beta")),
            )?;
        }
        Ok(x)
    }
}

/// Row offset of each sequence in the stacked hidden states, plus the total.
fn row_offsets(batch: &Batch) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch.len() + 1);
    let mut acc = 0;
    for b in 0..batch.len() {
        out.push(acc);
        acc += batch.seq_len(b);
    }
    out.push(acc);
    out
}

fn labelled_rows(
    batch: &Batch,
    labels: &[Vec<Option<u32>>],
    offsets: &[usize],
) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for b in 0..batch.len() {
        for (p, label) in labels[b].iter().enumerate().take(batch.seq_len(b)) {
            if let Some(l) = *label {
                rows.push(offsets[b] + p);
                targets.push(Some(l as usize));
            }
        }
    }
    (rows, targets)
}

/// Ties go to the lowest class index.
fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<u32> {
    let (m, c) = t.dims2();
    let data = t.data();
    (0..m)
        .map(|i| {
            let row = &data[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j].to_f64() > row[best].to_f64() {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}
