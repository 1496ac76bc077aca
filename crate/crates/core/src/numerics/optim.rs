use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Precision;

/// Plain SGD with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) {
        for (id, g) in grads {
            let vel = self
                .velocity
                .entry(*id)
                .or_insert_with(|| vec![0.0; g.len()]);
            let p = store.get_mut(*id).data_mut();
            for j in 0..g.len() {
                vel[j] = self.momentum * vel[j] + g[j];
                p[j] -= self.lr * vel[j];
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub precision: Precision,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>, u64)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            precision: Precision::F64,
            moments: HashMap::new(),
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    /// Applies one update to every parameter in `grads`. Step counts are kept
    /// per parameter, so parameters that only receive gradients in later
    /// stages start with a fresh bias correction.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) {
        for (id, g) in grads {
            let (m, v, t) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()], 0));
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let p = store.get_mut(*id).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] = self.precision.round(p[j] - self.lr * mh / (vh.sqrt() + self.eps));
            }
        }
    }
}
