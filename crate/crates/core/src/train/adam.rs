use super::TrainConfig;
use crate::tensor::{Float, ParamGrads, Parameters};

/// Adaptive moment estimation with bias correction and optional linear warmup.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    warmup: usize,
    last_lr: f64,
}

impl<F: Float> Adam<F> {
    pub fn new(params: &Parameters<F>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<F>> = params.iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            warmup: cfg.warmup_steps,
            last_lr: 0.0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        let t = self.t + 1;
        if self.warmup > 0 && t < self.warmup {
            self.lr * t as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }

    pub fn last_lr(&self) -> f64 {
        self.last_lr
    }

    pub fn step(&mut self, params: &mut Parameters<F>, grads: &ParamGrads<F>) {
        let lr = self.current_lr();
        self.t += 1;
        self.last_lr = lr;
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = F::c(lr / c1);
        let c2 = F::c(c2);
        let eps = F::c(self.eps);
        for (i, g) in grads.grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.by_index_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                w[j] -= step * m[j] / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Parameters::<f64>::new(0);
        p.insert("w", Tensor::from_f64(&[3], &[1.0, 1.0, 1.0]).unwrap()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(&p, &cfg);
        let g = ParamGrads {
            grads: vec![vec![2.0, -0.5, 0.0]],
        };
        opt.step(&mut p, &g);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6 && w[2] == 1.0);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let p = Parameters::<f64>::new(0);
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(&p, &cfg);
        let mut seen = Vec::new();
        for _ in 0..5 {
            seen.push(opt.current_lr());
            opt.step(&mut Parameters::new(0), &ParamGrads { grads: vec![] });
        }
        assert_eq!(seen, vec![0.25, 0.5, 0.75, 1.0, 1.0]);
    }
}
