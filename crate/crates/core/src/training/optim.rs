use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::diffcore::Tensor;
use crate::eqlayers::ParamMap;

/// Clamp applied to probabilities before taking logarithms.
pub const PROBABILITY_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy of probabilities against `{0, 1}` labels.
pub fn bce_loss(pred: &[f64], gt: &[f64]) -> Result<f64, TrainingError> {
    if pred.len() != gt.len() {
        return Err(TrainingError::Length { pred: pred.len(), gt: gt.len() });
    }
    if pred.is_empty() {
        return Err(TrainingError::Config("loss over zero samples".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let p = p.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update of `params` in place. Parameters without a
/// gradient entry are treated as having zero gradient.
pub fn adam_step(
    params: &mut ParamMap,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), TrainingError> {
    if let Some(name) = grads.keys().find(|k| !params.contains_key(*k)) {
        return Err(TrainingError::Config(format!("gradient for unknown parameter {name}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (name, theta) in params.iter_mut() {
        let n = theta.numel();
        let g = grads.get(name).map(Tensor::data);
        if let Some(g) = g {
            if g.len() != n {
                return Err(TrainingError::Config(format!(
                    "gradient for {name} has {} entries, expected {n}",
                    g.len()
                )));
            }
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (i, x) in theta.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *x -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
