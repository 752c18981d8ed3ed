use crate::nn::{ParamGroup, ParamStore, Tensor};

/// Adam with one learning rate per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr_main: f64,
    pub lr_entropy: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, lr_main: f64, lr_entropy: f64) -> Self {
        let zeros = || store.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            lr_main,
            lr_entropy,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let lr = match store.groups[i] {
                ParamGroup::Main => self.lr_main,
                ParamGroup::Entropy => self.lr_entropy,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in store.tensors[i].data.iter_mut().enumerate() {
                let gj = g.data[j] as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *p -= update as f32;
            }
        }
    }
}
