use std::ops::Range;

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::{DropoutKey, NumericError, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Gather {
        src: Var,
        rows: Vec<usize>,
    },
    Slice {
        src: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Records operations for one forward pass and replays them in reverse.
///
/// Nodes are appended after their parents, so reverse insertion order is a
/// reverse topological order and each node is visited exactly once.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        node_op: Op,
    ) -> Result<Var, NumericError> {
        let mut out = Vec::with_capacity(data.len());
        for x in data {
            let v = T::from_f64(x);
            if !v.is_finite() {
                return Err(NumericError::NonFinite(op));
            }
            out.push(v);
        }
        let value = Tensor::new(shape, out)?;
        self.nodes.push(Node { value, op: node_op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input; gradients flow to leaves.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x.to_f64() + y.to_f64())
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, data, Op::Add(a, b))
    }

    /// `a[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, n) = self.value(a).dims2();
        if self.value(b).len() != n {
            return Err(NumericError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(av[i * n + j].to_f64() + bv[j].to_f64());
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("add_row", shape, data, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x.to_f64() * y.to_f64())
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, data, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericError> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|x| x.to_f64() * c)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, data, Op::Scale(a, c))
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 || self.shape(b).len() != 2 {
            return Err(NumericError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nn(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 || self.shape(b).len() != 2 {
            return Err(NumericError::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nt(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        self.push("matmul_t", vec![m, n], out, Op::MatMulT(a, b))
    }

    /// Selects rows of a 2-D tensor; `embedding_lookup` is a gather.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var, NumericError> {
        let (r, c) = self.value(src).dims2();
        if rows.is_empty() {
            return Err(NumericError::Invalid("gather of zero rows".into()));
        }
        let sv = self.value(src).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            if row >= r {
                return Err(NumericError::OutOfRange {
                    op: "gather_rows",
                    index: row,
                    bound: r,
                });
            }
            data.extend(sv[row * c..(row + 1) * c].iter().map(|x| x.to_f64()));
        }
        self.push(
            "gather_rows",
            vec![rows.len(), c],
            data,
            Op::Gather {
                src,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericError> {
        self.gather_rows(table, ids)
    }

    /// Contiguous sub-block of a 2-D tensor.
    pub fn slice(
        &mut self,
        src: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    ) -> Result<Var, NumericError> {
        let (r, c) = self.value(src).dims2();
        if rows.end > r || cols.end > c || rows.is_empty() || cols.is_empty() {
            return Err(NumericError::OutOfRange {
                op: "slice",
                index: rows.end.max(cols.end),
                bound: r.max(c),
            });
        }
        let sv = self.value(src).data();
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend(
                sv[i * c + cols.start..i * c + cols.end]
                    .iter()
                    .map(|x| x.to_f64()),
            );
        }
        let shape = vec![rows.len(), cols.len()];
        self.push("slice", shape, data, Op::Slice { src, rows, cols })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let (m, _) = self.value(parts[0]).dims2();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pc) = self.value(p).dims2();
            if pm != m {
                return Err(NumericError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p).data();
                data.extend(pv[i * w..(i + 1) * w].iter().map(|x| x.to_f64()));
            }
        }
        self.push(
            "concat_cols",
            vec![m, n],
            data,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let (_, c) = self.value(parts[0]).dims2();
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pc) = self.value(p).dims2();
            if pc != c {
                return Err(NumericError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            m += pm;
            data.extend(self.value(p).data().iter().map(|x| x.to_f64()));
        }
        self.push(
            "concat_rows",
            vec![m, c],
            data,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericError> {
        let (m, n) = self.value(x).dims2();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(NumericError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j].to_f64() - mean) * is;
                xhat.push(h);
                out.push(h * g[j].to_f64() + b[j].to_f64());
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericError> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| {
                let v = v.to_f64();
                0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, data, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        let (m, n) = self.value(x).dims2();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let max = row
                .iter()
                .map(|v| v.to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.extend(exps.into_iter().map(|e| e / z));
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax_rows", shape, out, Op::SoftmaxRows(x))
    }

    /// Inverted dropout with a counter-based mask; `p == 0` is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, key: DropoutKey<'_>) -> Result<Var, NumericError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericError::Invalid(format!("dropout probability {}", p)));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let rng = key.rng();
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.value(x).len() as u64)
            .map(|i| if rng.uniform(i) < p { 0.0 } else { scale })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(v, k)| v.to_f64() * k)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("dropout", shape, data, Op::Dropout { x, keep })
    }

    /// Mean cross-entropy over rows with a target; rows with `None` are
    /// ignored. With no targets at all the loss is 0 with zero gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, NumericError> {
        let (m, c) = self.value(logits).dims2();
        if targets.len() != m {
            return Err(NumericError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= c {
                return Err(NumericError::OutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            let row = &lv[i * c..(i + 1) * c];
            let max = row
                .iter()
                .map(|v| v.to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
            let log_z = z.ln() + max;
            for j in 0..c {
                probs[i * c + j] = (row[j].to_f64() - log_z).exp();
            }
            total += log_z - row[t].to_f64();
            count += 1;
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        self.push(
            "softmax_cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericError> {
        let s = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, NumericError> {
        if self.value(output).len() != 1 {
            return Err(NumericError::Invalid("backward from a non-scalar".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    let buf = acc(grads, *v, g.len());
                    for (o, x) in buf.iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::AddRow(a, b) => {
                let n = self.value(*b).len();
                let buf = acc(grads, *a, g.len());
                for (o, x) in buf.iter_mut().zip(g) {
                    *o += x;
                }
                let buf = acc(grads, *b, n);
                for (i, x) in g.iter().enumerate() {
                    buf[i % n] += x;
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let buf = acc(grads, *a, g.len());
                for ((o, x), y) in buf.iter_mut().zip(g).zip(bv) {
                    *o += x * y.to_f64();
                }
                let buf = acc(grads, *b, g.len());
                for ((o, x), y) in buf.iter_mut().zip(g).zip(av) {
                    *o += x * y.to_f64();
                }
            }
            Op::Scale(a, c) => {
                let buf = acc(grads, *a, g.len());
                for (o, x) in buf.iter_mut().zip(g) {
                    *o += x * c;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = dC · Bᵀ ; dB = Aᵀ · dC
                mm_nt(g, bv, m, n, k, acc(grads, *a, m * k));
                mm_tn(av, g, m, k, n, acc(grads, *b, k * n));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (n, _) = self.value(*b).dims2();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // C = A Bᵀ: dA = dC · B ; dB = dCᵀ · A
                mm_nn(g, bv, m, n, k, acc(grads, *a, m * k));
                mm_tn(g, av, m, n, k, acc(grads, *b, n * k));
            }
            Op::Gather { src, rows } => {
                let (r, c) = self.value(*src).dims2();
                let buf = acc(grads, *src, r * c);
                for (i, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        buf[row * c + j] += g[i * c + j];
                    }
                }
            }
            Op::Slice { src, rows, cols } => {
                let (r, c) = self.value(*src).dims2();
                let w = cols.len();
                let buf = acc(grads, *src, r * c);
                for (ii, i) in rows.clone().enumerate() {
                    for (jj, j) in cols.clone().enumerate() {
                        buf[i * c + j] += g[ii * w + jj];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2();
                let mut off = 0;
                for p in parts {
                    let (_, w) = self.value(*p).dims2();
                    let buf = acc(grads, *p, m * w);
                    for i in 0..m {
                        for j in 0..w {
                            buf[i * w + j] += g[i * n + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let buf = acc(grads, *p, len);
                    for (o, x) in buf.iter_mut().zip(&g[off..off + len]) {
                        *o += x;
                    }
                    off += len;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.value(*x).dims2();
                let gv = self.value(*gamma).data();
                {
                    let buf = acc(grads, *gamma, n);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                {
                    let buf = acc(grads, *beta, n);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j];
                        }
                    }
                }
                let buf = acc(grads, *x, m * n);
                for i in 0..m {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let d = g[i * n + j] * gv[j].to_f64();
                        sum_d += d;
                        sum_dx += d * xhat[i * n + j];
                    }
                    for j in 0..n {
                        let d = g[i * n + j] * gv[j].to_f64();
                        buf[i * n + j] += inv_std[i] / n as f64
                            * (n as f64 * d - sum_d - xhat[i * n + j] * sum_dx);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let buf = acc(grads, *x, g.len());
                for ((o, d), v) in buf.iter_mut().zip(g).zip(xv) {
                    let v = v.to_f64();
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *o += d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = node.value.dims2();
                let y = node.value.data();
                let buf = acc(grads, *x, m * n);
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| g[i * n + j] * y[i * n + j].to_f64()).sum();
                    for j in 0..n {
                        buf[i * n + j] += y[i * n + j].to_f64() * (g[i * n + j] - dot);
                    }
                }
            }
            Op::Dropout { x, keep } => {
                let buf = acc(grads, *x, g.len());
                for ((o, d), k) in buf.iter_mut().zip(g).zip(keep) {
                    *o += d * k;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (m, c) = self.value(*logits).dims2();
                let buf = acc(grads, *logits, m * c);
                if *count == 0 {
                    return;
                }
                let scale = g[0] / *count as f64;
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        buf[i * c + j] += scale * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                let buf = acc(grads, *x, len);
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }
        }
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`; `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; len])
    }
}
