use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorData};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moments and step count of an AdamW run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| vec![0.0; t.len()];
        Self {
            config,
            step: 0,
            first: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            second: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
        }
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
///
/// Arithmetic runs in `f64`; results are stored back in each parameter's own precision.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingParam(format!("gradient of {name}")))?;
        let m = state
            .first
            .get(name)
            .ok_or_else(|| Error::MissingParam(format!("moment of {name}")))?;
        if g.len() != p.len() || m.len() != p.len() {
            return Err(Error::shape(format!(
                "gradient or moment of `{name}` does not match its parameter"
            )));
        }
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.first.get_mut(name).expect("checked");
        let v = state.second.get_mut(name).expect("checked");
        let mut values = p.to_f64_vec();
        for i in 0..values.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            values[i] = values[i] * (1.0 - lr * weight_decay) - lr * update;
        }
        let shape = p.shape().to_vec();
        *p = match p.data() {
            TensorData::F32(_) => {
                Tensor::from_f32(shape, values.into_iter().map(|v| v as f32).collect())?
            }
            TensorData::F64(_) => Tensor::from_f64(shape, values)?,
        };
    }
    Ok(())
}

/// Linear warmup then cosine decay, with the batch-size scaling rule for the peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn peak(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

pub fn lr_at(step: usize, schedule: &Schedule) -> f64 {
    let peak = schedule.peak();
    if step >= schedule.total_steps {
        return 0.0;
    }
    if step < schedule.warmup_steps {
        return peak * step as f64 / schedule.warmup_steps as f64;
    }
    let span = (schedule.total_steps - schedule.warmup_steps) as f64;
    let progress = (step - schedule.warmup_steps) as f64 / span;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}
