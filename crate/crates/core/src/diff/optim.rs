//! AdamW with cosine learning-rate decay.

use std::collections::HashSet;
use std::f64::consts::PI;

use indexmap::IndexMap;

use super::params::ParameterStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decay horizon in steps; 0 disables the schedule.
    pub horizon: usize,
    step: usize,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
    frozen: HashSet<String>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, horizon: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            horizon,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
            frozen: HashSet::new(),
        }
    }

    /// Parameters listed here are never updated.
    pub fn freeze<I: IntoIterator<Item = String>>(&mut self, names: I) {
        self.frozen.extend(names);
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// `lr * (1 + cos(pi * t / T)) / 2`, held at 0 past the horizon.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.horizon == 0 {
            return self.lr;
        }
        let frac = (t.min(self.horizon)) as f64 / self.horizon as f64;
        self.lr * 0.5 * (1.0 + (PI * frac).cos())
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    /// One decoupled-weight-decay Adam update from the gradients stored on
    /// `store`. Fails if any trainable parameter lacks a gradient.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        for (name, t) in store.iter() {
            if !self.frozen.contains(name) && t.grad.is_none() {
                return Err(Error::Contract(format!("parameter `{name}` has no gradient")));
            }
        }
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            if self.frozen.contains(name) {
                continue;
            }
            let n = p.len();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let grad = p.grad.take().expect("checked above");
            let decay = 1.0 - lr * self.weight_decay;
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w = *w * decay - lr * mh / (vh.sqrt() + self.eps);
            }
            p.grad = Some(grad);
        }
        self.step += 1;
        Ok(())
    }
}
