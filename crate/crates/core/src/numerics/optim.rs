//! AdamW with decoupled weight decay, plus learning-rate schedules.

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update with learning rate `lr` from the accumulated grads, then zero them.
    /// Frozen parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.frozen {
                p.grad.data_mut().fill(0.0);
                continue;
            }
            let (b1, b2) = (self.beta1, self.beta2);
            let decay = 1.0 - lr * self.weight_decay;
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, (w, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                md[i] = b1 * md[i] + (1.0 - b1) * g;
                vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.grad.data_mut().fill(0.0);
        }
    }
}

/// Linear decay from `base` at step 0 to `base * final_frac` at `total`.
pub fn linear_decay(base: f64, step: usize, total: usize, final_frac: f64) -> f64 {
    let f = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
    base * (1.0 - f * (1.0 - final_frac))
}

/// Cosine decay from `base` to `base * final_frac` over `total` steps.
pub fn cosine_decay(base: f64, step: usize, total: usize, final_frac: f64) -> f64 {
    let f = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
    let c = 0.5 * (1.0 + (std::f64::consts::PI * f).cos());
    base * (final_frac + (1.0 - final_frac) * c)
}
