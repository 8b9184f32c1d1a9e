use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Real, Tape, Var};
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::optim::{adamw_step, lr_at, AdamWConfig, OptimizerState, Schedule};
use super::{
    bind_params, check_params, forward_tape, init_params, truncated_normal, ModelConfig,
    ParamStore, ParamVars, INIT_STD,
};

/// Gradient of a scalar loss per parameter name, flattened row-major.
pub type Gradients = BTreeMap<String, Vec<f64>>;

/// Evaluates `loss` on a fresh tape and returns its value and the gradient of
/// every parameter. Parameters the loss does not reach get zero gradients.
pub fn grad<T: Real, F>(params: &ParamStore, loss: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape<T>, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::<T>::new();
    let vars = bind_params(&mut tape, params, true)?;
    let out = loss(&mut tape, &vars)?;
    let value = tape.scalar_value(out).to_f64();
    if !value.is_finite() {
        return Err(Error::Degenerate {
            op: "grad",
            message: format!("loss evaluated to {value}"),
        });
    }
    let grads = tape.backward(out);
    let mut map = Gradients::new();
    for (name, &v) in &vars {
        let g = match grads.get(v) {
            Some(m) => m.data.iter().map(|x| x.to_f64()).collect(),
            None => vec![0.0; params[name].len()],
        };
        map.insert(name.clone(), g);
    }
    Ok((value, map))
}

/// Mean loss and mean gradient over `count` samples, evaluated in parallel and
/// reduced in sample order so the result does not depend on thread timing.
pub fn batch_gradients<F>(params: &ParamStore, count: usize, loss: F) -> Result<(f64, Gradients)>
where
    F: Fn(usize, &mut Tape<f32>, &ParamVars) -> Result<Var> + Sync,
{
    if count == 0 {
        return Err(Error::config("empty batch"));
    }
    let parts: Vec<(f64, Gradients)> = (0..count)
        .into_par_iter()
        .map(|i| grad::<f32, _>(params, |tape, vars| loss(i, tape, vars)))
        .collect::<Result<_>>()?;
    let scale = 1.0 / count as f64;
    let mut iter = parts.into_iter();
    let (mut total, mut sum) = iter.next().expect("nonempty");
    for (value, g) in iter {
        total += value;
        for (name, acc) in sum.iter_mut() {
            for (a, b) in acc.iter_mut().zip(&g[name]) {
                *a += b;
            }
        }
    }
    for acc in sum.values_mut() {
        acc.iter_mut().for_each(|a| *a *= scale);
    }
    Ok((total * scale, sum))
}

pub const SEG_HEAD_WEIGHT: &str = "seg_head.weight";
pub const SEG_HEAD_BIAS: &str = "seg_head.bias";

/// Supervised per-token segmentation used to give a teacher structured attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

/// Trains a fresh model plus a linear token classifier on patch-majority labels.
/// Returns the parameters (including the classifier) and the per-step losses.
pub fn pretrain_segmenter(
    config: &ModelConfig,
    corpus: &[LabeledImage],
    settings: &PretrainSettings,
) -> Result<(ParamStore, Vec<f64>)> {
    if corpus.is_empty() || settings.batch_size == 0 || settings.classes < 2 {
        return Err(Error::config(
            "pretraining needs images, a positive batch size and at least two classes",
        ));
    }
    let mut params = init_params(config, settings.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5eed_0001);
    let (d, k) = (config.dim, settings.classes);
    params.insert(
        SEG_HEAD_WEIGHT.into(),
        Tensor::from_f32(vec![d, k], truncated_normal(&mut rng, d * k, INIT_STD))?,
    );
    params.insert(
        SEG_HEAD_BIAS.into(),
        Tensor::from_f32(vec![1, k], vec![0.0; k])?,
    );
    check_params(config, &params)?;

    let targets: Vec<Matrix<f32>> = corpus
        .iter()
        .map(|item| {
            let labels = item.patch_labels(config.patch, k)?;
            let mut m = Matrix::zeros(labels.len(), k);
            for (i, &l) in labels.iter().enumerate() {
                m.data[i * k + l] = 1.0;
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let n = config.tokens() as f64;
    let schedule = Schedule {
        base_lr: settings.base_lr,
        batch_size: settings.batch_size,
        warmup_steps: settings.warmup_steps,
        total_steps: settings.steps,
    };
    let mut state = OptimizerState::new(settings.optimizer, &params);
    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let batch: Vec<usize> = (0..settings.batch_size)
            .map(|_| rng.random_range(0..corpus.len()))
            .collect();
        let (loss, grads) = batch_gradients(&params, batch.len(), |i, tape, vars| {
            let idx = batch[i];
            let trace = forward_tape(tape, config, vars, &corpus[idx].image)?;
            let logits = tape.matmul(trace.output, vars[SEG_HEAD_WEIGHT]);
            let logits = tape.add_row(logits, vars[SEG_HEAD_BIAS]);
            let xent = tape.soft_target_xent(logits, targets[idx].clone());
            Ok(tape.affine(xent, 1.0 / n, 0.0))
        })
        .map_err(|e| match e {
            Error::Degenerate { .. } => Error::Diverged { step },
            other => other,
        })?;
        adamw_step(&mut params, &grads, &mut state, lr_at(step, &schedule))?;
        losses.push(loss);
    }
    Ok((params, losses))
}
