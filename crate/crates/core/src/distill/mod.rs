//! Attention distillation: the teacher-to-student KL objective, head
//! alignment, the feature-cosine baseline, and multi-layer targets.

mod run;

use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{LayerAttention, ModelConfig};
use crate::tensor::{check_row_stochastic, AttentionStack};

pub use run::{
    distill_loss_tape, heldout_eval, run_distillation, teacher_target, DistillCorpus, DistillLog,
    DistillPlan, DistillResult, Target, PROJ_BIAS, PROJ_WEIGHT,
};

/// Floor applied to teacher probabilities inside their own logarithm.
pub const TEACHER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    AttentionKl,
    FeatureCosine,
    AttentionKlMultilayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAlignment {
    /// The student's last block runs with the teacher's head count.
    #[default]
    AdaptiveHeads,
    /// An attention-only layer with the teacher's head count follows the last block.
    ExtraAttentionLayer,
}

impl LayerAttention {
    /// Splits a stack into one entry per layer.
    pub fn from_stack(stack: &AttentionStack) -> Vec<LayerAttention> {
        (0..stack.layers())
            .map(|l| LayerAttention {
                heads: stack.heads(),
                tokens: stack.tokens(),
                values: stack.layer(l).to_vec(),
            })
            .collect()
    }

    pub fn head(&self, m: usize) -> &[f64] {
        let nn = self.tokens * self.tokens;
        &self.values[m * nn..(m + 1) * nn]
    }

    fn check_shape(&self, what: &str) -> Result<()> {
        if self.heads == 0
            || self.tokens == 0
            || self.values.len() != self.heads * self.tokens * self.tokens
        {
            return Err(Error::shape(format!(
                "{what}: {} values for {} heads of {}x{}",
                self.values.len(),
                self.heads,
                self.tokens,
                self.tokens
            )));
        }
        Ok(())
    }
}

fn check_pair(teacher: &LayerAttention, student: &LayerAttention) -> Result<()> {
    teacher.check_shape("teacher")?;
    student.check_shape("student")?;
    if teacher.heads != student.heads {
        return Err(Error::shape(format!(
            "teacher has {} heads but student has {}; call align_student_heads first",
            teacher.heads, student.heads
        )));
    }
    if teacher.tokens != student.tokens {
        return Err(Error::shape(format!(
            "teacher has {} tokens but student has {}",
            teacher.tokens, student.tokens
        )));
    }
    Ok(())
}

/// `sum_j t_j (ln max(t_j, floor) - log_s_j)` over one row, skipping `t_j = 0`.
fn row_kl(t: &[f64], log_s: impl Iterator<Item = f64>) -> f64 {
    t.iter()
        .zip(log_s)
        .filter(|(&tv, _)| tv > 0.0)
        .map(|(&tv, ls)| tv * (tv.max(TEACHER_FLOOR).ln() - ls))
        .sum()
}

fn mean_kl(teacher: &LayerAttention, log_student: impl Fn(usize, usize) -> Vec<f64>) -> f64 {
    let n = teacher.tokens;
    let mut total = 0.0;
    for m in 0..teacher.heads {
        let head = teacher.head(m);
        let mut rows = 0.0;
        for i in 0..n {
            rows += row_kl(&head[i * n..(i + 1) * n], log_student(m, i).into_iter());
        }
        total += rows / n as f64;
    }
    total / teacher.heads as f64
}

/// Mean over heads of the row-averaged `KL(teacher || student)` on attention probabilities.
pub fn attention_kl_loss(teacher: &LayerAttention, student: &LayerAttention) -> Result<f64> {
    check_pair(teacher, student)?;
    let n = teacher.tokens;
    for m in 0..teacher.heads {
        check_row_stochastic(teacher.head(m), n, &format!("teacher head {m}"))?;
        check_row_stochastic(student.head(m), n, &format!("student head {m}"))?;
    }
    Ok(mean_kl(teacher, |m, i| {
        student.head(m)[i * n..(i + 1) * n]
            .iter()
            .map(|s| s.ln())
            .collect()
    }))
}

/// As [`attention_kl_loss`], with the student given as pre-softmax scores.
pub fn attention_kl_from_logits(
    teacher: &LayerAttention,
    student_logits: &LayerAttention,
) -> Result<f64> {
    check_pair(teacher, student_logits)?;
    let n = teacher.tokens;
    for m in 0..teacher.heads {
        check_row_stochastic(teacher.head(m), n, &format!("teacher head {m}"))?;
    }
    if student_logits.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate {
            op: "attention_kl_loss",
            message: "non-finite student logits".into(),
        });
    }
    Ok(mean_kl(teacher, |m, i| {
        let row = &student_logits.head(m)[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter().map(|v| v - lse).collect()
    }))
}

/// Records the KL objective on a tape with student scores as the variables.
pub fn attention_kl_tape<T: Real>(
    tape: &mut Tape<T>,
    teacher: &LayerAttention,
    student_logits: &[Var],
) -> Result<Var> {
    teacher.check_shape("teacher")?;
    if teacher.heads != student_logits.len() {
        return Err(Error::shape(format!(
            "teacher has {} heads but student has {}; call align_student_heads first",
            teacher.heads,
            student_logits.len()
        )));
    }
    let n = teacher.tokens;
    let mut constant = 0.0;
    let mut total: Option<Var> = None;
    for (m, &logits) in student_logits.iter().enumerate() {
        let lv = tape.value(logits);
        if (lv.rows, lv.cols) != (n, n) {
            return Err(Error::shape(format!(
                "student head {m} is {}x{}, teacher is {n}x{n}",
                lv.rows, lv.cols
            )));
        }
        let head = teacher.head(m);
        constant += head
            .iter()
            .filter(|&&t| t > 0.0)
            .map(|&t| t * t.max(TEACHER_FLOOR).ln())
            .sum::<f64>();
        let target = Matrix::new(n, n, head.iter().map(|&t| T::from_f64(t)).collect());
        let xent = tape.soft_target_xent(logits, target);
        total = Some(match total {
            Some(acc) => tape.add(acc, xent),
            None => xent,
        });
    }
    let scale = 1.0 / (teacher.heads * n) as f64;
    Ok(tape.affine(total.expect("at least one head"), scale, constant * scale))
}

fn check_features(ft: &[f64], fs: &[f64], tokens: usize, dim: usize) -> Result<()> {
    if tokens == 0 || dim == 0 || ft.len() != tokens * dim || fs.len() != tokens * dim {
        return Err(Error::shape(format!(
            "feature cosine loss needs two {tokens}x{dim} matrices, got {} and {} values",
            ft.len(),
            fs.len()
        )));
    }
    Ok(())
}

fn check_nonzero_rows(f: &[f64], dim: usize, what: &str) -> Result<()> {
    for (i, row) in f.chunks(dim).enumerate() {
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate {
                op: "feature_cosine_loss",
                message: format!("{what} token {i} has zero norm"),
            });
        }
    }
    Ok(())
}

/// Mean over tokens of `1 - cos(f_t, f_s)`.
pub fn feature_cosine_loss(ft: &[f64], fs: &[f64], tokens: usize, dim: usize) -> Result<f64> {
    check_features(ft, fs, tokens, dim)?;
    check_nonzero_rows(ft, dim, "teacher")?;
    check_nonzero_rows(fs, dim, "student")?;
    let mut total = 0.0;
    for (a, b) in ft.chunks(dim).zip(fs.chunks(dim)) {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
        total += 1.0 - dot;
    }
    Ok(total / tokens as f64)
}

/// Records the cosine objective on a tape; `student` is the projected `N x D_T` variable.
pub fn feature_cosine_tape<T: Real>(
    tape: &mut Tape<T>,
    teacher: &[f64],
    student: Var,
    dim: usize,
) -> Result<Var> {
    let sv = tape.value(student);
    let tokens = sv.rows;
    if sv.cols != dim || teacher.len() != tokens * dim {
        return Err(Error::shape(format!(
            "student features are {}x{}, teacher has {} values for dim {dim}",
            sv.rows,
            sv.cols,
            teacher.len()
        )));
    }
    check_nonzero_rows(teacher, dim, "teacher")?;
    let sv64: Vec<f64> = sv.data.iter().map(|v| v.to_f64()).collect();
    check_nonzero_rows(&sv64, dim, "student")?;
    let mut unit = Vec::with_capacity(teacher.len());
    for row in teacher.chunks(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        unit.extend(row.iter().map(|&v| T::from_f64(v / norm)));
    }
    let t = tape.constant(Matrix::new(tokens, dim, unit));
    let s = tape.row_normalize(student);
    let prod = tape.mul(s, t);
    let dots = tape.sum(prod);
    Ok(tape.affine(dots, -1.0 / tokens as f64, 1.0))
}

/// Concatenates the heads of the listed layers (1-based, in list order).
pub fn concat_multilayer_targets(
    layers: &[LayerAttention],
    indices: &[usize],
) -> Result<LayerAttention> {
    let first = *indices
        .first()
        .ok_or_else(|| Error::config("multi-layer target list is empty"))?;
    let pick = |idx: usize| {
        layers
            .get(idx.wrapping_sub(1))
            .ok_or_else(|| Error::config(format!("layer {idx} outside 1..={}", layers.len())))
    };
    let tokens = pick(first)?.tokens;
    let mut values = Vec::new();
    let mut heads = 0;
    for &idx in indices {
        let layer = pick(idx)?;
        layer.check_shape("target layer")?;
        if layer.tokens != tokens {
            return Err(Error::shape(format!(
                "layer {idx} has {} tokens, layer {first} has {tokens}",
                layer.tokens
            )));
        }
        heads += layer.heads;
        values.extend_from_slice(&layer.values);
    }
    Ok(LayerAttention {
        heads,
        tokens,
        values,
    })
}

/// Gives the student's last block `teacher_heads` heads of width `dim / teacher_heads`.
pub fn align_student_heads(config: &ModelConfig, teacher_heads: usize) -> Result<ModelConfig> {
    if teacher_heads == 0 || !config.dim.is_multiple_of(teacher_heads) {
        return Err(Error::config(format!(
            "student dim {} is not divisible by teacher head count {teacher_heads}",
            config.dim
        )));
    }
    let mut out = config.clone();
    out.last_layer_heads = (teacher_heads != config.heads).then_some(teacher_heads);
    out.validate()?;
    Ok(out)
}

/// Appends an attention-only layer with `teacher_heads` heads.
pub fn add_extra_attention(config: &ModelConfig, teacher_heads: usize) -> Result<ModelConfig> {
    if teacher_heads == 0 || !config.dim.is_multiple_of(teacher_heads) {
        return Err(Error::config(format!(
            "student dim {} is not divisible by teacher head count {teacher_heads}",
            config.dim
        )));
    }
    let mut out = config.clone();
    out.extra_attention_heads = Some(teacher_heads);
    out.validate()?;
    Ok(out)
}

/// Applies the chosen alignment for a target with `teacher_heads` heads.
pub fn align(
    config: &ModelConfig,
    mode: HeadAlignment,
    teacher_heads: usize,
) -> Result<ModelConfig> {
    match mode {
        HeadAlignment::AdaptiveHeads => align_student_heads(config, teacher_heads),
        HeadAlignment::ExtraAttentionLayer => add_extra_attention(config, teacher_heads),
    }
}

/// Reverts to the standard head layout for downstream use.
pub fn restore_student_heads(config: &ModelConfig) -> ModelConfig {
    let mut out = config.clone();
    out.last_layer_heads = None;
    out.extra_attention_heads = None;
    out
}
