use crate::numerics::{ParamGrads, ParamStore};

/// Adam with a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads.get(id);
            let data = store.get_mut(id).data_mut();
            for j in 0..data.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                data[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}
