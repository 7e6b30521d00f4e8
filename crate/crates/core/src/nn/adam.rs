use serde::{Deserialize, Serialize};

use super::{Module, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the modules' visit order.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, modules: &mut [&mut dyn Module<F>]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr_t = c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one, lr_t, eps) = (F::one(), F::of(lr_t), F::of(c.eps));
        let mut idx = 0;
        for m in modules.iter_mut() {
            m.visit_mut(&mut |p| {
                if self.first.len() <= idx {
                    self.first.push(vec![F::zero(); p.len()]);
                    self.second.push(vec![F::zero(); p.len()]);
                }
                let (m1, m2) = (&mut self.first[idx], &mut self.second[idx]);
                for i in 0..p.len() {
                    let g = p.grad[i];
                    m1[i] = b1 * m1[i] + (one - b1) * g;
                    m2[i] = b2 * m2[i] + (one - b2) * g * g;
                    p.value[i] = p.value[i] - lr_t * m1[i] / (m2[i].sqrt() + eps);
                }
                idx += 1;
            });
        }
    }
}
