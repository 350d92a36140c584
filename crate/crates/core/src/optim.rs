use std::collections::HashMap;

use crate::autograd::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0), step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `names` that has a gradient.
    /// Returns the (pre-clip) global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, names: &[String]) -> f64 {
        self.step += 1;
        let norm = names
            .iter()
            .filter_map(|n| grads.param(n))
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for name in names {
            let Some(g) = grads.param(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
            let p = store.get_mut(name);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gv = gv * scale;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
        norm
    }
}
