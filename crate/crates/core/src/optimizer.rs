//! Bias-corrected adaptive-moment (Adam) updates on flat parameter groups.

use crate::diff::Array;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a list of tensors updated together.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update of `params[k] -= lr · m̂ / (√v̂ + ε)` for every group.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "parameter group count");
        assert_eq!(grads.len(), self.m.len(), "gradient group count");
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "gradient size");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }

    /// [`Self::step`] on arrays.
    pub fn step_arrays(&mut self, params: &mut [&mut Array], grads: &[&Array]) {
        let mut p: Vec<&mut [f64]> = params.iter_mut().map(|a| a.data_mut()).collect();
        let g: Vec<&[f64]> = grads.iter().map(|a| a.data()).collect();
        self.step(&mut p, &g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr · g / (|g| + ε).
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut [&mut p], &[&[4.0, -0.5, 0.0]]);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn matches_reference_recurrence() {
        let cfg = AdamConfig::with_lr(0.05);
        let mut adam = Adam::new(cfg, &[1]);
        let mut x = vec![3.0];
        let (mut m, mut v, mut y) = (0.0f64, 0.0f64, 3.0f64);
        for t in 1..=20 {
            let g = 2.0 * x[0];
            adam.step(&mut [&mut x], &[&[g]]);
            let gy = 2.0 * y;
            m = 0.9 * m + (1.0 - 0.9) * gy;
            v = 0.999 * v + (1.0 - 0.999) * gy * gy;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            y -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert_eq!(x[0], y);
        }
        assert!(x[0] < 3.0);
    }
}
