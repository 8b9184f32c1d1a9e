use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, Var};
use crate::data::{Augment, Image};
use crate::error::{Error, Result};
use crate::metrics::nmi_layer;
use crate::model::{
    adamw_step, batch_gradients, bind_params, check_params, forward_image, forward_tape,
    init_params, lr_at, truncated_normal, AdamWConfig, ForwardOutput, LayerAttention, ModelConfig,
    OptimizerState, ParamStore, ParamVars, Schedule, EXTRA_PREFIX, INIT_STD,
};
use crate::tensor::Tensor;

use super::{
    align, attention_kl_tape, concat_multilayer_targets, feature_cosine_tape,
    restore_student_heads, HeadAlignment, LossKind,
};

pub const PROJ_WEIGHT: &str = "distill_proj.weight";
pub const PROJ_BIAS: &str = "distill_proj.bias";
const PROJ_PREFIX: &str = "distill_proj.";
const AUX_SEED: u64 = 0xa11_9e5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillPlan {
    /// 1-based teacher layer whose attention or features are the target.
    pub teacher_target_layer: usize,
    pub loss_kind: LossKind,
    /// 1-based layers whose heads are concatenated, for the multi-layer kind only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multilayer_targets: Option<Vec<usize>>,
    #[serde(default)]
    pub head_alignment: HeadAlignment,
    pub epochs: usize,
    pub batch_size: usize,
    /// Scaled by `batch_size / 256` to give the peak rate.
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Random resized crop and flip applied identically for teacher and student.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<Augment>,
    pub seed: u64,
}

impl DistillPlan {
    pub fn validate(&self, teacher: &ModelConfig) -> Result<()> {
        let depth = teacher.depth;
        if self.teacher_target_layer == 0 || self.teacher_target_layer > depth {
            return Err(Error::config(format!(
                "teacher_target_layer {} outside 1..={depth}",
                self.teacher_target_layer
            )));
        }
        match (self.loss_kind, &self.multilayer_targets) {
            (LossKind::AttentionKlMultilayer, Some(list)) if !list.is_empty() => {
                if let Some(bad) = list.iter().find(|&&l| l == 0 || l > depth) {
                    return Err(Error::config(format!(
                        "multi-layer target {bad} outside 1..={depth}"
                    )));
                }
            }
            (LossKind::AttentionKlMultilayer, _) => {
                return Err(Error::config(
                    "attention_kl_multilayer needs a nonempty multilayer_targets list",
                ));
            }
            (_, Some(_)) => {
                return Err(Error::config(
                    "multilayer_targets is only valid for attention_kl_multilayer",
                ))
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::config(format!(
                "base_lr {} is invalid",
                self.base_lr
            )));
        }
        if let Some(aug) = &self.augment {
            aug.validate()?;
        }
        Ok(())
    }

    /// Heads of the distillation target.
    pub fn target_heads(&self, teacher: &ModelConfig) -> usize {
        match (&self.loss_kind, &self.multilayer_targets) {
            (LossKind::AttentionKlMultilayer, Some(list)) => {
                list.iter().map(|&l| teacher.heads_at(l - 1)).sum()
            }
            _ => teacher.heads_at(self.teacher_target_layer - 1),
        }
    }
}

/// Distillation target for one image.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Attention(LayerAttention),
    Features { dim: usize, values: Vec<f64> },
}

fn target_from_output(out: &ForwardOutput, plan: &DistillPlan) -> Result<Target> {
    let layer = plan.teacher_target_layer;
    Ok(match plan.loss_kind {
        LossKind::AttentionKl => Target::Attention(out.attention[layer - 1].clone()),
        LossKind::AttentionKlMultilayer => Target::Attention(concat_multilayer_targets(
            &out.attention,
            plan.multilayer_targets.as_deref().unwrap_or_default(),
        )?),
        LossKind::FeatureCosine => Target::Features {
            dim: out.features.dim(),
            values: out.features.layer(layer - 1).to_vec(),
        },
    })
}

fn target_attention(out: &ForwardOutput, plan: &DistillPlan) -> Result<LayerAttention> {
    match plan.loss_kind {
        LossKind::AttentionKlMultilayer => concat_multilayer_targets(
            &out.attention,
            plan.multilayer_targets.as_deref().unwrap_or_default(),
        ),
        _ => Ok(out.attention[plan.teacher_target_layer - 1].clone()),
    }
}

/// Teacher target for one image, computed with frozen `f32` parameters.
pub fn teacher_target(
    config: &ModelConfig,
    params: &ParamStore,
    image: &Image,
    plan: &DistillPlan,
) -> Result<Target> {
    target_from_output(&forward_image::<f32>(config, params, image)?, plan)
}

/// Records the distillation objective of one image. Returns the loss and the
/// student attention maps being distilled (the appended layer when present,
/// otherwise the last block).
pub fn distill_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    student: &ModelConfig,
    vars: &ParamVars,
    image: &Image,
    target: &Target,
) -> Result<(Var, Vec<Var>)> {
    let trace = forward_tape(tape, student, vars, image)?;
    let (logits, maps) = if student.extra_attention_heads.is_some() {
        (trace.extra_logits.clone(), trace.extra_attention.clone())
    } else {
        (
            trace.logits[student.depth - 1].clone(),
            trace.attention[student.depth - 1].clone(),
        )
    };
    let loss = match target {
        Target::Attention(t) => attention_kl_tape(tape, t, &logits)?,
        Target::Features { dim, values } => {
            let w = *vars
                .get(PROJ_WEIGHT)
                .ok_or_else(|| Error::MissingParam(PROJ_WEIGHT.into()))?;
            let b = *vars
                .get(PROJ_BIAS)
                .ok_or_else(|| Error::MissingParam(PROJ_BIAS.into()))?;
            let last = trace.features[student.depth - 1];
            let p = tape.matmul(last, w);
            let p = tape.add_row(p, b);
            feature_cosine_tape(tape, values, p, *dim)?
        }
    };
    Ok((loss, maps))
}

/// Mean held-out objective and mean NMI of the distilled student maps.
pub fn heldout_eval(
    student: &ModelConfig,
    params: &ParamStore,
    images: &[Image],
    targets: &[Target],
) -> Result<(f64, f64)> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(Error::config(
            "held-out evaluation needs one target per image",
        ));
    }
    let parts: Vec<(f64, f64)> = images
        .par_iter()
        .zip(targets.par_iter())
        .map(|(img, target)| {
            let mut tape = Tape::<f32>::new();
            let vars = bind_params(&mut tape, params, false)?;
            let (loss, maps) = distill_loss_tape(&mut tape, student, &vars, img, target)?;
            let n = student.tokens();
            let values: Vec<f64> = maps
                .iter()
                .flat_map(|&m| tape.value(m).data.iter().map(|&v| v as f64))
                .collect();
            Ok((tape.scalar_value(loss) as f64, nmi_layer(&values, n)?))
        })
        .collect::<Result<_>>()?;
    let k = parts.len() as f64;
    let (mut loss, mut nmi) = (0.0, 0.0);
    for (l, n) in parts {
        loss += l;
        nmi += n;
    }
    Ok((loss / k, nmi / k))
}

#[derive(Debug, Clone, Default)]
pub struct DistillCorpus {
    pub train: Vec<Image>,
    pub heldout: Vec<Image>,
}

/// Training record. Held-out values are the objective of the plan's loss kind
/// (the attention KL for the attention kinds) on unaugmented held-out images.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DistillLog {
    pub step_loss: Vec<f64>,
    pub step_lr: Vec<f64>,
    pub initial_heldout_loss: f64,
    pub initial_student_nmi: f64,
    pub epoch_heldout_loss: Vec<f64>,
    pub epoch_student_nmi: Vec<f64>,
    /// Mean held-out NMI of the teacher target maps.
    pub teacher_nmi: f64,
}

impl DistillLog {
    pub fn final_heldout_loss(&self) -> f64 {
        self.epoch_heldout_loss
            .last()
            .copied()
            .unwrap_or(self.initial_heldout_loss)
    }

    pub fn final_student_nmi(&self) -> f64 {
        self.epoch_student_nmi
            .last()
            .copied()
            .unwrap_or(self.initial_student_nmi)
    }

    /// One JSON object per line: step records, then epoch records (epoch 0 is initialization).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::json!({"teacher_nmi": self.teacher_nmi}).to_string());
        out.push('\n');
        for (i, (loss, lr)) in self.step_loss.iter().zip(&self.step_lr).enumerate() {
            out.push_str(&serde_json::json!({"step": i, "loss": loss, "lr": lr}).to_string());
            out.push('\n');
        }
        let epochs = std::iter::once((self.initial_heldout_loss, self.initial_student_nmi)).chain(
            self.epoch_heldout_loss
                .iter()
                .copied()
                .zip(self.epoch_student_nmi.iter().copied()),
        );
        for (e, (loss, nmi)) in epochs.enumerate() {
            out.push_str(
                &serde_json::json!({"epoch": e, "heldout_loss": loss, "student_nmi": nmi})
                    .to_string(),
            );
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct DistillResult {
    /// Student config with the standard head layout restored.
    pub config: ModelConfig,
    /// Student parameters without alignment or projection extras.
    pub params: ParamStore,
    pub log: DistillLog,
}

fn student_start(
    base: &ModelConfig,
    aligned: &ModelConfig,
    teacher_dim: usize,
    plan: &DistillPlan,
    init: Option<&ParamStore>,
) -> Result<ParamStore> {
    let mut params = match init {
        Some(p) => p.clone(),
        None => init_params(base, plan.seed)?,
    };
    let aux = init_params(aligned, plan.seed ^ AUX_SEED)?;
    for (name, t) in aux {
        if name.starts_with(EXTRA_PREFIX) {
            params.entry(name).or_insert(t);
        }
    }
    if plan.loss_kind == LossKind::FeatureCosine && !params.contains_key(PROJ_WEIGHT) {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ AUX_SEED);
        let (ds, dt) = (aligned.dim, teacher_dim);
        params.insert(
            PROJ_WEIGHT.into(),
            Tensor::from_f32(vec![ds, dt], truncated_normal(&mut rng, ds * dt, INIT_STD))?,
        );
        params.insert(
            PROJ_BIAS.into(),
            Tensor::from_f32(vec![1, dt], vec![0.0; dt])?,
        );
    }
    check_params(aligned, &params)?;
    Ok(params)
}

/// Distills the frozen teacher into a student. `init` replaces the seeded
/// student initialization when given.
pub fn run_distillation(
    teacher: &ModelConfig,
    teacher_params: &ParamStore,
    student: &ModelConfig,
    corpus: &DistillCorpus,
    plan: &DistillPlan,
    init: Option<&ParamStore>,
) -> Result<DistillResult> {
    plan.validate(teacher)?;
    student.validate()?;
    check_params(teacher, teacher_params)?;
    if corpus.train.is_empty() || corpus.heldout.is_empty() {
        return Err(Error::config(
            "distillation needs training and held-out images",
        ));
    }
    if teacher.tokens() != student.tokens() {
        return Err(Error::config(format!(
            "teacher has {} tokens per image, student has {}",
            teacher.tokens(),
            student.tokens()
        )));
    }
    let base = restore_student_heads(student);
    let aligned = match plan.loss_kind {
        LossKind::FeatureCosine => base.clone(),
        _ => align(&base, plan.head_alignment, plan.target_heads(teacher))?,
    };
    let mut params = student_start(&base, &aligned, teacher.dim, plan, init)?;

    let heldout_out: Vec<ForwardOutput> = corpus
        .heldout
        .par_iter()
        .map(|img| forward_image::<f32>(teacher, teacher_params, img))
        .collect::<Result<_>>()?;
    let heldout_targets: Vec<Target> = heldout_out
        .iter()
        .map(|o| target_from_output(o, plan))
        .collect::<Result<_>>()?;
    let mut teacher_nmi = 0.0;
    for out in &heldout_out {
        teacher_nmi += nmi_layer(&target_attention(out, plan)?.values, teacher.tokens())?;
    }
    teacher_nmi /= heldout_out.len() as f64;
    drop(heldout_out);

    let (initial_loss, initial_nmi) =
        heldout_eval(&aligned, &params, &corpus.heldout, &heldout_targets)?;
    let mut log = DistillLog {
        initial_heldout_loss: initial_loss,
        initial_student_nmi: initial_nmi,
        teacher_nmi,
        ..Default::default()
    };

    let steps_per_epoch = corpus.train.len().div_ceil(plan.batch_size);
    let schedule = Schedule {
        base_lr: plan.base_lr,
        batch_size: plan.batch_size,
        warmup_steps: plan.warmup_epochs * steps_per_epoch,
        total_steps: plan.epochs * steps_per_epoch,
    };
    let mut state = OptimizerState::new(plan.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut step = 0;
    for _ in 0..plan.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(plan.batch_size) {
            let images: Vec<Image> = chunk
                .iter()
                .map(|&i| match &plan.augment {
                    Some(aug) => aug.apply(&corpus.train[i], &mut rng),
                    None => corpus.train[i].clone(),
                })
                .collect();
            let targets: Vec<Target> = images
                .par_iter()
                .map(|img| teacher_target(teacher, teacher_params, img, plan))
                .collect::<Result<_>>()?;
            let (loss, grads) = batch_gradients(&params, images.len(), |i, tape, vars| {
                Ok(distill_loss_tape(tape, &aligned, vars, &images[i], &targets[i])?.0)
            })
            .map_err(|e| match e {
                Error::Degenerate { op: "grad", .. } => Error::Diverged { step },
                other => other,
            })?;
            let lr = lr_at(step, &schedule);
            adamw_step(&mut params, &grads, &mut state, lr)?;
            if params.values().any(|t| !t.is_finite()) {
                return Err(Error::Diverged { step });
            }
            log.step_loss.push(loss);
            log.step_lr.push(lr);
            step += 1;
        }
        let (loss, nmi) = heldout_eval(&aligned, &params, &corpus.heldout, &heldout_targets)?;
        log.epoch_heldout_loss.push(loss);
        log.epoch_student_nmi.push(nmi);
    }

    params.retain(|name, _| !name.starts_with(EXTRA_PREFIX) && !name.starts_with(PROJ_PREFIX));
    Ok(DistillResult {
        config: base,
        params,
        log,
    })
}
