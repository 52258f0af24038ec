//! Adam with bias correction, learning-rate schedules and global-norm
//! gradient clipping.

use std::collections::BTreeMap;

use crate::config::Schedule;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        for (name, value, grad) in store.iter_mut_with_grads() {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(value.shape()), Tensor::zeros(value.shape())));
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Learning rate for update `t` (0-based) of `total`: linear warmup over
/// `warmup` updates, then constant or `lr₀·½(1 + cos(π (t-w)/(T-w)))`.
pub fn learning_rate(schedule: Schedule, lr0: f64, t: usize, total: usize, warmup: usize) -> f64 {
    if t < warmup {
        return lr0 * (t + 1) as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => lr0,
        Schedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = ((t - warmup) as f64 / span).min(1.0);
            lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

pub fn grad_norm<T: Real>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .filter_map(|(name, _)| store.grad(name))
        .flat_map(|g| g.data().iter())
        .map(|&g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in store.grads_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
