//! Adaptive-moment optimizer with decoupled weight decay.

use ndarray::{Array2, Zip};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[Array2<f64>]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
            v: shapes.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` against `grads` (gradients of a loss to minimize).
    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![array![[3.0, -2.0]]];
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0), &p);
        for _ in 0..500 {
            let g = vec![p[0].mapv(|x| 2.0 * x)];
            opt.step(&mut p, &g);
        }
        assert!(p[0].iter().all(|x| x.abs() < 1e-2), "{:?}", p[0]);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![array![[1.5]]];
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0), &p);
        opt.step(&mut p, &[array![[0.0]]]);
        assert_eq!(p[0][[0, 0]], 1.5);
    }
}
