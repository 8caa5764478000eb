use super::TrainConfig;
use crate::encoder::ParamStore;

/// Adaptive-moment optimizer with global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: f64,
    warmup: usize,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            clip_norm: cfg.clip_norm,
            warmup: cfg.warmup_steps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    /// Global L2 norm of all gradients currently held by `params`.
    pub fn grad_norm(params: &ParamStore) -> f64 {
        params
            .iter()
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// One update from the gradients stored on `params`. Weights without a
    /// gradient see a zero gradient (their moments still decay).
    pub fn step(&mut self, params: &mut ParamStore) {
        self.t += 1;
        let norm = Self::grad_norm(params);
        let clip = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        let lr = if self.warmup > 0 && self.t <= self.warmup {
            self.lr * self.t as f64 / self.warmup as f64
        } else {
            self.lr
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (_, tensor)) in params.iter_mut().enumerate() {
            let grad = tensor.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i] * clip);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
