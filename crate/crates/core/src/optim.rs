//! Adam with a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub base_lr: f64,
    pub factor: f64,
    /// Epochs between decays.
    pub interval: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            factor: 0.1,
            interval: 8,
        }
    }
}

impl Schedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.factor.powi((epoch / self.interval.max(1)) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParameterStore, schedule: Schedule) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from `grads`; parameters without a gradient
    /// still have their moments decayed.
    pub fn update(&mut self, store: &mut ParameterStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut gi = grads.iter().peekable();
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = match gi.peek() {
                Some((gid, g)) if *gid == id => {
                    gi.next();
                    Some(g)
                }
                _ => None,
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.value_mut(id).data_mut();
            for k in 0..w.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                w[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
