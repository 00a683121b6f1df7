use std::collections::BTreeMap;

use super::{Module, ParamId};
use crate::tensor::{Gradients, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `modules` that has a gradient.
    pub fn step(&mut self, modules: &mut [&mut dyn Module], grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let moments = &mut self.moments;
        for m in modules.iter_mut() {
            m.visit_mut("", &mut |_, p| {
                let Some(g) = grads.by_id(p.id()) else { return };
                let shape = g.shape().to_vec();
                let (m1, m2) = moments
                    .entry(p.id())
                    .or_insert_with(|| (Tensor::zeros(shape.clone()), Tensor::zeros(shape)));
                let w = p.value_mut();
                for (((w, &g), m), v) in w
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m1.data_mut())
                    .zip(m2.data_mut())
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                }
            });
        }
    }
}
