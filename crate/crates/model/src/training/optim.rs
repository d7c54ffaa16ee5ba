use hot_core::DenseTensor;
use serde::{Deserialize, Serialize};

use crate::layer::Params;
use crate::training::TrainError;

fn default_lr() -> f64 {
    2e-4
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

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Adam moments for every parameter of a [`Params`] set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<DenseTensor>,
    pub v: Vec<DenseTensor>,
}

impl OptimState {
    pub fn new(config: AdamConfig, params: &Params) -> Result<Self, TrainError> {
        let zeros = || {
            params
                .tensors()
                .map(|t| DenseTensor::zeros(t.dims().to_vec()))
                .collect::<Result<Vec<_>, _>>()
        };
        Ok(OptimState {
            config,
            step: 0,
            m: zeros()?,
            v: zeros()?,
        })
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts before any
/// parameter changes.
pub fn adam_step(state: &mut OptimState, grads: &[DenseTensor], params: &mut Params) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Shape(format!(
            "{} gradients, {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.dims() != g.dims() {
            return Err(TrainError::Shape(format!(
                "gradient of {name} has shape {}, parameter {}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: name.to_string(),
                index: i,
                value: g.data()[i],
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}
