use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// First and second moments per tensor plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    pub step: u64,
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let grads = grads.tensors();
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite {
            tensor: format!("gradient of {name}"),
        });
    }
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors, {} gradients",
            tensors.len(),
            grads.len()
        )));
    }
    for ((pn, p), (gn, g)) in tensors.iter().zip(&grads) {
        if pn != gn || p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "parameter {pn} {:?} vs gradient {gn} {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    if state.m.is_empty() {
        state.m = grads
            .iter()
            .map(|(_, g)| ArrayD::zeros(g.raw_dim()))
            .collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((_, p), (_, g)), (m, v)) in tensors
        .iter_mut()
        .zip(&grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            });
    }
    Ok(())
}
