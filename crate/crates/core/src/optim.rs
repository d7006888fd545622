//! Adam over named parameter maps.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// GAN-style defaults, β = (0.5, 0.999).
    pub fn gan(lr: f64) -> Self {
        Self::new(lr, 0.5, 0.999)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Forgets all moment estimates.
    pub fn reset(&mut self) {
        self.steps = 0;
        self.moments.clear();
    }

    /// Applies one update for every parameter that has a gradient.
    ///
    /// Moment buffers whose length no longer matches the parameter (after class
    /// growth) restart from zero.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let Some(param) = params.get_mut(name) else { continue };
            let n = param.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                *m = vec![0.0; n];
                *v = vec![0.0; n];
            }
            let p = param.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
