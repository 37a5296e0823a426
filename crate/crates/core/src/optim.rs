//! AdamW with decoupled weight decay, two learning-rate groups and a linear
//! decay schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGrads, ParamGroup, ParamStore};

/// `base · (1 − step / max_steps)`; the rate reaches 0 at `max_steps`.
pub fn linear_decay(base: f64, step: usize, max_steps: usize) -> f64 {
    if max_steps == 0 {
        return base;
    }
    base * (1.0 - step as f64 / max_steps as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates aligned with a [`ParamStore`]; `None` until a parameter
/// first receives a gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub updates: Vec<u64>,
    pub first: Vec<Option<Array2<f64>>>,
    pub second: Vec<Option<Array2<f64>>>,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            updates: vec![0; store.len()],
            first: vec![None; store.len()],
            second: vec![None; store.len()],
        }
    }
}

/// Learning rates for the two parameter groups at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub pretrained: f64,
    pub raw: f64,
}

impl GroupRates {
    pub fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Pretrained => self.pretrained,
            ParamGroup::Raw => self.raw,
        }
    }
}

impl AdamW {
    /// Updates every parameter that has a gradient. Parameters without one are
    /// left bitwise untouched, weight decay included.
    pub fn step(&self, params: &mut ParamStore, grads: &ParamGrads, state: &mut AdamWState, rates: GroupRates) {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.0;
            let lr = rates.for_group(params.group(id));
            state.updates[i] += 1;
            let t = state.updates[i] as i32;
            let m = state.first[i].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = state.second[i].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let decay = if params.decays(id) { lr * self.weight_decay } else { 0.0 };
            let m = state.first[i].as_ref().expect("set above");
            let v = state.second[i].as_ref().expect("set above");
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= decay * *p;
                *p -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            });
        }
    }
}
