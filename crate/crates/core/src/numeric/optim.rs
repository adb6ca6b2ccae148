use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamRegistry};
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamRegistry<F>, config: AdamConfig) -> Self {
        let zeros = |id: ParamId| vec![F::zero(); params.get(id).len()];
        Self {
            config,
            step: 0,
            m: params.ids().map(zeros).collect(),
            v: params.ids().map(zeros).collect(),
        }
    }

    /// One bias-corrected Adam update over every parameter that has a
    /// gradient, followed by clearing all gradients.
    pub fn step(&mut self, params: &mut ParamRegistry<F>, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::config(format!("learning rate {lr} must be positive")));
        }
        if self.m.len() != params.len() {
            return Err(Error::config("optimizer state does not match parameter registry"));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (one_b1, one_b2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(eps);
        for id in params.ids().collect::<Vec<_>>() {
            let tensor = params.get_mut(id);
            let Some(grad) = tensor.grad().map(<[F]>::to_vec) else {
                continue;
            };
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            for (((theta, g), m), v) in tensor.values_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * *g;
                *v = b2 * *v + one_b2 * *g * *g;
                let v_hat = *v * inv_bc2;
                *theta -= step_size * *m / (v_hat.sqrt() + eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

/// Warmup-and-decay schedule: `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at(step: u64, d: usize, warmup: u64) -> f64 {
    assert!(step >= 1 && warmup >= 1 && d >= 1, "lr_at needs step, d, warmup >= 1");
    let s = step as f64;
    (d as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}
