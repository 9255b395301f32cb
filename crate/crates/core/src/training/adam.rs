//! Bias-corrected Adam over the trainable entries of a parameter store.

use std::collections::BTreeMap;

use crate::networks::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<F>>,
    pub v: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> Default for AdamState<F> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of scalars of optimizer state (two moments per entry).
    pub fn state_len(&self) -> usize {
        self.m.values().map(Vec::len).sum::<usize>() + self.v.values().map(Vec::len).sum::<usize>()
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<F: Scalar>(grads: &BTreeMap<String, Tensor<F>>) -> f64 {
    grads.values().flat_map(|g| g.data().iter()).map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm<F: Scalar>(grads: &mut BTreeMap<String, Tensor<F>>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = F::lit(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// One Adam update. Frozen parameters, and trainable ones without a
/// gradient, are left untouched and get no state.
pub fn adam_step<F: Scalar>(
    params: &mut ParamStore<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut AdamState<F>,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        let n = g.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![F::zero(); n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![F::zero(); n]);
        let data = p.tensor.data_mut();
        for i in 0..n {
            let gi = g.data()[i].f64();
            let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
            m[i] = F::lit(mi);
            v[i] = F::lit(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
            data[i] = F::lit(data[i].f64() - update);
        }
    }
}
