//! Adam with L2 weight decay over any set of [`Params`].

use serde::{Deserialize, Serialize};

use crate::nn::{self, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[&dyn Params]) -> Self {
        let n = params.iter().map(|p| nn::param_count(*p)).sum();
        Self {
            cfg,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update; `grads[i]` must have the layout of `params[i]`.
    pub fn step(&mut self, params: &mut [&mut dyn Params], grads: &[&dyn Params]) {
        let g: Vec<f64> = grads.iter().flat_map(|p| nn::flatten(*p)).collect();
        assert_eq!(g.len(), self.m.len(), "gradient layout mismatch");
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let mut i = 0;
        for p in params.iter_mut() {
            p.visit_mut("", &mut |_, values| {
                for theta in values.iter_mut() {
                    let grad = g[i] + weight_decay * *theta;
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad * grad;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    *theta -= learning_rate * m_hat / (v_hat.sqrt() + eps);
                    i += 1;
                }
            });
        }
    }
}
