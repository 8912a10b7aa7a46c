use super::{OptimizerConfig, OptimizerKind};

/// `J = (λ/N) Σ |θi − θ0i|` and its subgradient with `sign(0) = 0`.
pub fn l1_anchor(theta: &[f32], theta0: &[f32], lambda: f64, n: usize) -> (f64, Vec<f64>) {
    assert_eq!(theta.len(), theta0.len(), "l1_anchor length mismatch");
    assert!(n > 0, "l1_anchor needs N > 0");
    let c = lambda / n as f64;
    let mut penalty = 0.0;
    let grad = theta
        .iter()
        .zip(theta0)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            penalty += d.abs();
            if d > 0.0 {
                c
            } else if d < 0.0 {
                -c
            } else {
                0.0
            }
        })
        .collect();
    (c * penalty, grad)
}

/// `η0 · (1 − t/T)`, zero at and after `T`.
pub fn linear_decay(eta0: f64, t: usize, total: usize) -> f64 {
    if total == 0 || t >= total {
        0.0
    } else {
        eta0 * (1.0 - t as f64 / total as f64)
    }
}

/// Per-coordinate optimizer moments for one parameter vector.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(cfg: OptimizerConfig, len: usize) -> Self {
        OptimizerState {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Applies one update to `values` over the coordinates in `trainable`.
    ///
    /// Updates are computed in f64 and rounded once per coordinate.
    /// `current` holds the parameter values the gradient was taken at and
    /// feeds decoupled weight decay.
    pub fn step(
        &mut self,
        values: &mut [f32],
        current: &[f32],
        grad: &[f64],
        lr: f64,
        trainable: &[usize],
    ) {
        self.t += 1;
        let c = self.cfg;
        match c.kind {
            OptimizerKind::Sgd => {
                for &i in trainable {
                    values[i] = (values[i] as f64
                        - lr * (grad[i] + c.weight_decay * current[i] as f64))
                        as f32;
                }
            }
            OptimizerKind::Adamw => {
                let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                for &i in trainable {
                    let g = grad[i];
                    self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
                    self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    let u = mhat / (vhat.sqrt() + c.epsilon) + c.weight_decay * current[i] as f64;
                    values[i] = (values[i] as f64 - lr * u) as f32;
                }
            }
        }
    }

    /// Coordinates that have ever received a non-zero moment.
    pub fn touched(&self) -> usize {
        self.m.iter().filter(|x| **x != 0.0).count()
    }
}
