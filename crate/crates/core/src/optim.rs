//! First-order update rules over flat parameter slices.

use serde::{Deserialize, Serialize};

pub fn sgd_update(param: &mut [f64], grad: &[f64], lr: f64) {
    param.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
}

/// Adam with decoupled weight decay. Hyperparameters only; per-tensor state
/// lives in [`MomentState`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct MomentState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn update(&self, state: &mut MomentState, param: &mut [f64], grad: &[f64], lr: f64) {
        if state.m.len() != param.len() {
            state.m = vec![0.0; param.len()];
            state.v = vec![0.0; param.len()];
            state.t = 0;
        }
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t);
        let bc2 = 1.0 - self.beta2.powi(state.t);
        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
            *p -= lr * self.weight_decay * *p;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// Learning rate after `epoch` of `total` epochs when the rate drops by
/// `factor` at every `1/phases` of the run.
pub fn step_decay(base: f64, epoch: usize, total: usize, factor: f64, phases: usize) -> f64 {
    let period = total.div_ceil(phases.max(1)).max(1);
    base * factor.powi((epoch / period) as i32)
}
