//! Trainable parameters and the Adam optimizer.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// All zeros (biases, batch-norm shift).
    Zeros,
    /// All ones (batch-norm scale).
    Ones,
    /// Gaussian with standard deviation `sqrt(2 / fan_in)`, the usual choice
    /// ahead of ReLU nonlinearities.
    HeNormal { fan_in: usize },
    /// Gaussian with a fixed standard deviation.
    Normal { std: f64 },
}

/// One trainable tensor: value, gradient accumulator, and Adam moments.
///
/// Gradients accumulate across `backward` calls until the owner zeroes
/// them; the moment buffers belong to the parameter so optimizer state
/// survives wherever the parameter travels.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

impl Param {
    pub fn new(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| std * sample_standard_normal(rng)).collect()
            }
            Init::Normal { std } => {
                (0..n).map(|_| std * sample_standard_normal(rng)).collect()
            }
        };
        let value = ArrayD::from_shape_vec(IxDyn(shape), values)
            .expect("shape/product mismatch is impossible by construction");
        let zeros = ArrayD::zeros(value.raw_dim());
        Param { grad: zeros.clone(), m: zeros.clone(), v: zeros, value }
    }

    /// Number of scalar weights.
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Box–Muller standard normal draw. Two uniforms per call keeps the stream
/// layout simple and platform-independent.
fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Guard the log: random() yields [0, 1), so flip to (0, 1].
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Adam with bias correction. One instance drives one model; the step
/// counter is shared across all parameters it updates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    /// Apply one update to every parameter from its accumulated gradient.
    /// Gradients are left untouched; callers zero them when starting the
    /// next accumulation.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params.iter_mut() {
            let g = &p.grad;
            p.m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            p.v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let lr = self.lr;
            let eps = self.eps;
            // value -= lr * m_hat / (sqrt(v_hat) + eps)
            ndarray::Zip::from(&mut p.value)
                .and(&p.m)
                .and(&p.v)
                .for_each(|w, &m, &v| {
                    *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }
}
