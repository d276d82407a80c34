use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, hyper: AdamHyper) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            hyper,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, lr: f32) {
        self.step += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let c2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            let g = grads.get(&id);
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi as f64 / c1;
                let vhat = vi as f64 / c2;
                p.data_mut()[i] -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<ParamId, Tensor>, max_norm: f32) -> f32 {
    let norm = grads
        .values()
        .map(|g| g.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm as f64 {
        let s = (max_norm as f64 / norm) as f32;
        grads.values_mut().for_each(|g| g.scale_inplace(s));
    }
    norm as f32
}
