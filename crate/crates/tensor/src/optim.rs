use crate::nn::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam with per-group learning rates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, e)| Tensor::zeros(e.value.shape()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
        lr: impl Fn(ParamGroup) -> f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            if !store.entry(*id).trainable {
                continue;
            }
            let rate = lr(store.entry(*id).group);
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(*id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine annealing from `base` at epoch 0 to `floor` at epoch `t_max`.
pub fn cosine_lr(base: f64, floor: f64, epoch: usize, t_max: usize) -> f64 {
    if t_max == 0 {
        return base;
    }
    let e = epoch.min(t_max) as f64;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * e / t_max as f64).cos())
}
