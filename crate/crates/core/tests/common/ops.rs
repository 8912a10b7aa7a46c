//! Every differentiable tape op as a scalar function of one input, on
//! shapes drawn from a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_tune::numeric::{
    grad_check, CounterRng, DropoutKey, NumericError, Real, Tape, Tensor, Var,
};

type ScalarFn<T> = Box<dyn Fn(&mut Tape<T>, Var) -> Result<Var, NumericError>>;

pub struct OpCase<T: Real> {
    pub name: &'static str,
    pub point: Tensor<T>,
    pub f: ScalarFn<T>,
}

impl<T: Real> OpCase<T> {
    pub fn max_rel_error(&self, step: f64) -> f64 {
        grad_check(&self.f, &self.point, step)
            .unwrap_or_else(|e| panic!("{}: {}", self.name, e))
            .max_rel_error
    }
}

fn tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<T> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Rows with a standard deviation of at least 0.2. Central differences at
/// step 1e-3 lose accuracy on near-constant rows, where the third
/// derivative of layer norm grows as `1/σ³`.
fn spread<T: Real>(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor<T> {
    let data: Vec<f64> = (0..m * n)
        .map(|i| 1.2 * (i % n) as f64 - 0.6 * n as f64 + rng.random_range(-0.4..0.4))
        .collect();
    Tensor::from_f64(vec![m, n], &data).unwrap()
}

/// `Σ w ⊙ y` with fixed pseudo-random weights, so every output coordinate
/// feeds the checked gradient.
fn project<T: Real>(t: &mut Tape<T>, y: Var, seed: u64) -> Result<Var, NumericError> {
    let shape = t.value(y).shape().to_vec();
    let rng = CounterRng::new(seed);
    let w: Vec<f64> = (0..t.value(y).len() as u64)
        .map(|i| 2.0 * rng.uniform(i) - 1.0)
        .collect();
    let w = t.leaf(Tensor::from_f64(shape, &w)?);
    let p = t.mul(y, w)?;
    t.sum(p)
}

pub fn op_cases<T: Real>(seed: u64) -> Vec<OpCase<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=4);
    let n = rng.random_range(2..=5);
    let k = rng.random_range(1..=4);
    let mut cases: Vec<OpCase<T>> = Vec::new();
    let mut push = |name, point, f: ScalarFn<T>| cases.push(OpCase { name, point, f });

    let c: Tensor<T> = tensor(&mut rng, vec![m, n]);
    push(
        "add",
        tensor(&mut rng, vec![m, n]),
        Box::new(move |t, x| {
            let c = t.leaf(c.clone());
            let y = t.add(x, c)?;
            project(t, y, 1)
        }),
    );

    let a: Tensor<T> = tensor(&mut rng, vec![m, n]);
    push(
        "add_row",
        tensor(&mut rng, vec![n]),
        Box::new(move |t, x| {
            let a = t.leaf(a.clone());
            let y = t.add_row(a, x)?;
            project(t, y, 2)
        }),
    );

    let c: Tensor<T> = tensor(&mut rng, vec![m, n]);
    push(
        "mul",
        tensor(&mut rng, vec![m, n]),
        Box::new(move |t, x| {
            let c = t.leaf(c.clone());
            let y = t.mul(x, c)?;
            let y = t.mul(y, x)?;
            project(t, y, 3)
        }),
    );

    push(
        "scale",
        tensor(&mut rng, vec![m, n]),
        Box::new(|t, x| {
            let y = t.scale(x, -0.7)?;
            project(t, y, 4)
        }),
    );

    let b: Tensor<T> = tensor(&mut rng, vec![k, n]);
    push(
        "matmul.left",
        tensor(&mut rng, vec![m, k]),
        Box::new(move |t, x| {
            let b = t.leaf(b.clone());
            let y = t.matmul(x, b)?;
            project(t, y, 5)
        }),
    );

    let a: Tensor<T> = tensor(&mut rng, vec![m, k]);
    push(
        "matmul.right",
        tensor(&mut rng, vec![k, n]),
        Box::new(move |t, x| {
            let a = t.leaf(a.clone());
            let y = t.matmul(a, x)?;
            project(t, y, 6)
        }),
    );

    let b: Tensor<T> = tensor(&mut rng, vec![n, k]);
    push(
        "matmul_t.left",
        tensor(&mut rng, vec![m, k]),
        Box::new(move |t, x| {
            let b = t.leaf(b.clone());
            let y = t.matmul_t(x, b)?;
            project(t, y, 7)
        }),
    );

    let a: Tensor<T> = tensor(&mut rng, vec![m, k]);
    push(
        "matmul_t.right",
        tensor(&mut rng, vec![n, k]),
        Box::new(move |t, x| {
            let a = t.leaf(a.clone());
            let y = t.matmul_t(a, x)?;
            project(t, y, 8)
        }),
    );

    let rows = n + 1;
    let ids: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..rows)).collect();
    push(
        "embedding_lookup",
        tensor(&mut rng, vec![rows, k]),
        Box::new(move |t, x| {
            let y = t.embedding_lookup(x, &ids)?;
            project(t, y, 9)
        }),
    );

    let (r0, c0) = (rng.random_range(0..m), rng.random_range(0..n));
    push(
        "slice",
        tensor(&mut rng, vec![m, n]),
        Box::new(move |t, x| {
            let y = t.slice(x, r0..m, c0..n)?;
            project(t, y, 10)
        }),
    );

    let c: Tensor<T> = tensor(&mut rng, vec![m, k]);
    push(
        "concat_cols",
        tensor(&mut rng, vec![m, n]),
        Box::new(move |t, x| {
            let c = t.leaf(c.clone());
            let y = t.concat_cols(&[c, x, c])?;
            project(t, y, 11)
        }),
    );

    let c: Tensor<T> = tensor(&mut rng, vec![k, n]);
    push(
        "concat_rows",
        tensor(&mut rng, vec![m, n]),
        Box::new(move |t, x| {
            let c = t.leaf(c.clone());
            let y = t.concat_rows(&[x, c, x])?;
            project(t, y, 12)
        }),
    );

    let (g, be): (Tensor<T>, Tensor<T>) = (tensor(&mut rng, vec![n]), tensor(&mut rng, vec![n]));
    push(
        "layer_norm.x",
        spread(&mut rng, m, n),
        Box::new(move |t, x| {
            let g = t.leaf(g.clone());
            let be = t.leaf(be.clone());
            let y = t.layer_norm(x, g, be)?;
            project(t, y, 13)
        }),
    );

    let (xv, be): (Tensor<T>, Tensor<T>) = (spread(&mut rng, m, n), tensor(&mut rng, vec![n]));
    push(
        "layer_norm.gamma",
        tensor(&mut rng, vec![n]),
        Box::new(move |t, g| {
            let x = t.leaf(xv.clone());
            let be = t.leaf(be.clone());
            let y = t.layer_norm(x, g, be)?;
            project(t, y, 14)
        }),
    );

    let (xv, g): (Tensor<T>, Tensor<T>) = (spread(&mut rng, m, n), tensor(&mut rng, vec![n]));
    push(
        "layer_norm.beta",
        tensor(&mut rng, vec![n]),
        Box::new(move |t, be| {
            let x = t.leaf(xv.clone());
            let g = t.leaf(g.clone());
            let y = t.layer_norm(x, g, be)?;
            project(t, y, 15)
        }),
    );

    push(
        "gelu",
        tensor(&mut rng, vec![m, n]),
        Box::new(|t, x| {
            let y = t.gelu(x)?;
            project(t, y, 16)
        }),
    );

    push(
        "softmax_rows",
        tensor(&mut rng, vec![m, n]),
        Box::new(|t, x| {
            let y = t.softmax_rows(x)?;
            project(t, y, 17)
        }),
    );

    let key_seed = rng.random();
    push(
        "dropout",
        tensor(&mut rng, vec![m, n]),
        Box::new(move |t, x| {
            let key = DropoutKey {
                seed: key_seed,
                step: 3,
                site: "check",
            };
            let y = t.dropout(x, 0.3, key)?;
            project(t, y, 18)
        }),
    );

    let mut targets: Vec<Option<usize>> = (0..m)
        .map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..n)))
        .collect();
    targets[0] = Some(rng.random_range(0..n));
    push(
        "softmax_cross_entropy",
        tensor(&mut rng, vec![m, n]),
        Box::new(move |t, x| t.softmax_cross_entropy(x, &targets)),
    );

    push(
        "sum",
        tensor(&mut rng, vec![m, n]),
        Box::new(|t, x| {
            let y = t.mul(x, x)?;
            t.sum(y)
        }),
    );

    cases
}
