//! Minimal ViT-style encoder: patch embedding, pre-norm attention and MLP
//! blocks, no class token.

mod optim;
mod train;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Real, Tape, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::{AttentionStack, DType, FeatureStack, Tensor};

pub use optim::{adamw_step, lr_at, AdamWConfig, OptimizerState, Schedule};
pub use train::{
    batch_gradients, grad, pretrain_segmenter, Gradients, PretrainSettings, SEG_HEAD_BIAS,
    SEG_HEAD_WEIGHT,
};

/// Named parameter tensors, each of rank 2.
pub type ParamStore = BTreeMap<String, Tensor>;

/// Parameters bound to a tape.
pub type ParamVars = BTreeMap<String, Var>;

pub const INIT_STD: f64 = 0.02;

fn default_mlp_ratio() -> usize {
    4
}

fn default_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    /// Input `(height, width)`.
    pub image: (usize, usize),
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Head count of the last block when it differs from `heads`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_layer_heads: Option<usize>,
    /// Heads of an attention-only layer appended after the last block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_attention_heads: Option<usize>,
    #[serde(default)]
    pub learnable_pos: bool,
}

impl ModelConfig {
    pub fn new(
        depth: usize,
        dim: usize,
        heads: usize,
        patch: usize,
        image: (usize, usize),
    ) -> Result<Self> {
        let config = Self {
            depth,
            dim,
            heads,
            patch,
            image,
            mlp_ratio: 4,
            channels: 3,
            last_layer_heads: None,
            extra_attention_heads: None,
            learnable_pos: false,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        for (what, h) in [
            ("last-layer", self.last_layer_heads),
            ("extra-attention", self.extra_attention_heads),
        ] {
            if let Some(h) = h {
                if h == 0 || !self.dim.is_multiple_of(h) {
                    return Err(Error::config(format!(
                        "dim {} is not divisible by {h} {what} heads",
                        self.dim
                    )));
                }
            }
        }
        if !self.learnable_pos && !self.dim.is_multiple_of(4) {
            return Err(Error::config(format!(
                "sinusoidal position embeddings need dim divisible by 4, got {}",
                self.dim
            )));
        }
        let (h, w) = self.image;
        if self.patch == 0 || h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::config(format!(
                "image {h}x{w} is not divisible by patch {}",
                self.patch
            )));
        }
        if self.mlp_ratio == 0 || self.channels == 0 {
            return Err(Error::config("mlp_ratio and channels must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image.0 / self.patch, self.image.1 / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Heads of block `layer` (0-based).
    pub fn heads_at(&self, layer: usize) -> usize {
        if layer + 1 == self.depth {
            self.last_layer_heads.unwrap_or(self.heads)
        } else {
            self.heads
        }
    }

    /// Every parameter name with its `[rows, cols]` shape.
    pub fn param_shapes(&self) -> Vec<(String, [usize; 2])> {
        let (d, hd) = (self.dim, self.hidden_dim());
        let mut out = vec![
            ("patch_embed.weight".to_string(), [self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), [1, d]),
        ];
        if self.learnable_pos {
            out.push(("pos_embed".to_string(), [self.tokens(), d]));
        }
        for l in 0..self.depth {
            let p = format!("blocks.{l}");
            for (name, shape) in [
                ("norm1.weight", [1, d]),
                ("norm1.bias", [1, d]),
                ("attn.q.weight", [d, d]),
                ("attn.q.bias", [1, d]),
                ("attn.k.weight", [d, d]),
                ("attn.k.bias", [1, d]),
                ("attn.v.weight", [d, d]),
                ("attn.v.bias", [1, d]),
                ("attn.proj.weight", [d, d]),
                ("attn.proj.bias", [1, d]),
                ("norm2.weight", [1, d]),
                ("norm2.bias", [1, d]),
                ("mlp.fc1.weight", [d, hd]),
                ("mlp.fc1.bias", [1, hd]),
                ("mlp.fc2.weight", [hd, d]),
                ("mlp.fc2.bias", [1, d]),
            ] {
                out.push((format!("{p}.{name}"), shape));
            }
        }
        out.push(("norm.weight".to_string(), [1, d]));
        out.push(("norm.bias".to_string(), [1, d]));
        if self.extra_attention_heads.is_some() {
            for (name, shape) in [
                ("norm.weight", [1, d]),
                ("norm.bias", [1, d]),
                ("q.weight", [d, d]),
                ("q.bias", [1, d]),
                ("k.weight", [d, d]),
                ("k.bias", [1, d]),
            ] {
                out.push((format!("{EXTRA_PREFIX}{name}"), shape));
            }
        }
        out
    }
}

/// Name prefix of the attention-only layer used for head alignment.
pub const EXTRA_PREFIX: &str = "extra_attn.";

fn is_norm_gain(name: &str) -> bool {
    name.ends_with("norm.weight")
        || name.ends_with("norm1.weight")
        || name.ends_with("norm2.weight")
}

/// Draws `N(0, std)` truncated to two standard deviations.
pub fn truncated_normal(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f32> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..len)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v as f32;
            }
        })
        .collect()
}

/// Fresh `f32` parameters: truncated normal weights, zero biases, unit norm gains.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes = config.param_shapes();
    shapes.sort();
    let mut params = ParamStore::new();
    for (name, [r, c]) in shapes {
        let data = if is_norm_gain(&name) {
            vec![1.0; r * c]
        } else if name.ends_with(".bias") {
            vec![0.0; r * c]
        } else {
            truncated_normal(&mut rng, r * c, INIT_STD)
        };
        params.insert(name, Tensor::from_f32(vec![r, c], data)?);
    }
    Ok(params)
}

/// Fixed 2D sine-cosine embedding: the first half of the channels encodes the
/// token row, the second half the column.
pub fn sincos_pos_embed(grid: (usize, usize), dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let quarter = half / 2;
    let mut out = vec![0.0; grid.0 * grid.1 * dim];
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let row = &mut out[(r * grid.1 + c) * dim..(r * grid.1 + c + 1) * dim];
            for (offset, pos) in [(0, r as f64), (half, c as f64)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    row[offset + i] = (pos * omega).sin();
                    row[offset + quarter + i] = (pos * omega).cos();
                }
            }
        }
    }
    out
}

/// Checks that `params` holds exactly the names and shapes `config` needs,
/// ignoring names outside the model such as task heads.
pub fn check_params(config: &ModelConfig, params: &ParamStore) -> Result<()> {
    for (name, [r, c]) in config.param_shapes() {
        let t = params
            .get(&name)
            .ok_or_else(|| Error::MissingParam(name.clone()))?;
        if t.shape() != [r, c] {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, expected [{r}, {c}]",
                t.shape()
            )));
        }
    }
    Ok(())
}

pub fn to_matrix<T: Real>(t: &Tensor) -> Result<Matrix<T>> {
    match *t.shape() {
        [r, c] => Ok(Matrix::new(
            r,
            c,
            t.to_f64_vec().into_iter().map(T::from_f64).collect(),
        )),
        _ => Err(Error::shape(format!(
            "parameter of shape {:?} is not a matrix",
            t.shape()
        ))),
    }
}

/// Registers every tensor as a leaf; `trainable` selects params or constants.
pub fn bind_params<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamStore,
    trainable: bool,
) -> Result<ParamVars> {
    let mut vars = ParamVars::new();
    for (name, t) in params {
        let m = to_matrix::<T>(t)?;
        let v = if trainable {
            tape.param(m)
        } else {
            tape.constant(m)
        };
        vars.insert(name.clone(), v);
    }
    Ok(vars)
}

fn get(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::MissingParam(name.to_string()))
}

/// Tape handles produced by one forward pass over one image.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Residual stream after each block, `N x d`.
    pub features: Vec<Var>,
    /// Scaled attention scores per block and head, `N x N`.
    pub logits: Vec<Vec<Var>>,
    /// Softmax of `logits`.
    pub attention: Vec<Vec<Var>>,
    /// Scores and maps of the appended attention-only layer, if configured.
    pub extra_logits: Vec<Var>,
    pub extra_attention: Vec<Var>,
    /// Final normalized tokens.
    pub output: Var,
}

fn layer_norm<T: Real>(tape: &mut Tape<T>, x: Var, vars: &ParamVars, prefix: &str) -> Result<Var> {
    let g = get(vars, &format!("{prefix}.weight"))?;
    let b = get(vars, &format!("{prefix}.bias"))?;
    let s = tape.standardize(x);
    let s = tape.mul_row(s, g);
    Ok(tape.add_row(s, b))
}

fn linear<T: Real>(tape: &mut Tape<T>, x: Var, vars: &ParamVars, prefix: &str) -> Result<Var> {
    let w = get(vars, &format!("{prefix}.weight"))?;
    let b = get(vars, &format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w);
    Ok(tape.add_row(y, b))
}

/// Per-head scaled scores `Q_m K_m^T / sqrt(d_head)`.
fn attention_scores<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    dim: usize,
    heads: usize,
) -> Vec<Var> {
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    (0..heads)
        .map(|m| {
            let qm = tape.slice_cols(q, m * hd, hd);
            let km = tape.slice_cols(k, m * hd, hd);
            let s = tape.matmul_t(qm, false, km, true);
            tape.affine(s, scale, 0.0)
        })
        .collect()
}

/// Records the forward pass of one image.
pub fn forward_tape<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    vars: &ParamVars,
    image: &Image,
) -> Result<Trace> {
    if (image.height, image.width) != config.image || image.channels != config.channels {
        return Err(Error::shape(format!(
            "image {}x{}x{} does not match config {}x{}x{}",
            image.height,
            image.width,
            image.channels,
            config.image.0,
            config.image.1,
            config.channels
        )));
    }
    let (n, d) = (config.tokens(), config.dim);
    let patches = image.patchify(config.patch)?;
    let patches = tape.constant(Matrix::new(
        n,
        config.patch_dim(),
        patches.into_iter().map(|v| T::from_f64(v as f64)).collect(),
    ));
    let mut x = linear(tape, patches, vars, "patch_embed")?;
    let pos = if config.learnable_pos {
        get(vars, "pos_embed")?
    } else {
        let pe = sincos_pos_embed(config.grid(), d);
        tape.constant(Matrix::new(n, d, pe.into_iter().map(T::from_f64).collect()))
    };
    x = tape.add(x, pos);

    let mut trace = Trace {
        features: Vec::with_capacity(config.depth),
        logits: Vec::with_capacity(config.depth),
        attention: Vec::with_capacity(config.depth),
        extra_logits: Vec::new(),
        extra_attention: Vec::new(),
        output: x,
    };
    for l in 0..config.depth {
        let p = format!("blocks.{l}");
        let heads = config.heads_at(l);
        let h = layer_norm(tape, x, vars, &format!("{p}.norm1"))?;
        let q = linear(tape, h, vars, &format!("{p}.attn.q"))?;
        let k = linear(tape, h, vars, &format!("{p}.attn.k"))?;
        let v = linear(tape, h, vars, &format!("{p}.attn.v"))?;
        let scores = attention_scores(tape, q, k, d, heads);
        let hd = d / heads;
        let mut maps = Vec::with_capacity(heads);
        let mut outs = Vec::with_capacity(heads);
        for (m, &s) in scores.iter().enumerate() {
            let a = tape.softmax(s);
            let vm = tape.slice_cols(v, m * hd, hd);
            outs.push(tape.matmul(a, vm));
            maps.push(a);
        }
        let o = tape.concat_cols(&outs);
        let o = linear(tape, o, vars, &format!("{p}.attn.proj"))?;
        x = tape.add(x, o);
        let h = layer_norm(tape, x, vars, &format!("{p}.norm2"))?;
        let h = linear(tape, h, vars, &format!("{p}.mlp.fc1"))?;
        let h = tape.gelu(h);
        let h = linear(tape, h, vars, &format!("{p}.mlp.fc2"))?;
        x = tape.add(x, h);
        trace.features.push(x);
        trace.logits.push(scores);
        trace.attention.push(maps);
    }
    trace.output = layer_norm(tape, x, vars, "norm")?;
    if let Some(heads) = config.extra_attention_heads {
        let h = layer_norm(tape, x, vars, &format!("{EXTRA_PREFIX}norm"))?;
        let q = linear(tape, h, vars, &format!("{EXTRA_PREFIX}q"))?;
        let k = linear(tape, h, vars, &format!("{EXTRA_PREFIX}k"))?;
        trace.extra_logits = attention_scores(tape, q, k, d, heads);
        trace.extra_attention = trace
            .extra_logits
            .iter()
            .map(|&s| tape.softmax(s))
            .collect();
    }
    Ok(trace)
}

/// Attention maps of one block: `heads x N x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub heads: usize,
    pub tokens: usize,
    pub values: Vec<f64>,
}

/// Per-image forward result.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub features: FeatureStack,
    pub attention: Vec<LayerAttention>,
    pub extra_attention: Option<LayerAttention>,
}

impl ForwardOutput {
    /// All blocks as one stack; fails when head counts differ between blocks.
    pub fn attention_stack(&self) -> Result<AttentionStack> {
        let heads = self.attention[0].heads;
        if self.attention.iter().any(|a| a.heads != heads) {
            return Err(Error::shape(
                "blocks have different head counts".to_string(),
            ));
        }
        let tokens = self.attention[0].tokens;
        let values = self
            .attention
            .iter()
            .flat_map(|a| a.values.iter().copied())
            .collect();
        AttentionStack::new(self.attention.len(), heads, tokens, DType::F32, values)
    }
}

fn collect_heads<T: Real>(tape: &Tape<T>, maps: &[Var], tokens: usize) -> LayerAttention {
    let values = maps
        .iter()
        .flat_map(|&a| tape.value(a).data.iter().map(|v| v.to_f64()))
        .collect();
    LayerAttention {
        heads: maps.len(),
        tokens,
        values,
    }
}

/// Frozen forward of one image in precision `T`.
pub fn forward_image<T: Real>(
    config: &ModelConfig,
    params: &ParamStore,
    image: &Image,
) -> Result<ForwardOutput> {
    check_params(config, params)?;
    let mut tape = Tape::<T>::new();
    let vars = bind_params(&mut tape, params, false)?;
    let trace = forward_tape(&mut tape, config, &vars, image)?;
    let n = config.tokens();
    let features = trace
        .features
        .iter()
        .flat_map(|&f| tape.value(f).data.iter().map(|v| v.to_f64()))
        .collect();
    let dtype = if std::mem::size_of::<T>() == 4 {
        DType::F32
    } else {
        DType::F64
    };
    Ok(ForwardOutput {
        features: FeatureStack::new(config.depth, n, config.dim, dtype, features)?,
        attention: trace
            .attention
            .iter()
            .map(|maps| collect_heads(&tape, maps, n))
            .collect(),
        extra_attention: (!trace.extra_attention.is_empty())
            .then(|| collect_heads(&tape, &trace.extra_attention, n)),
    })
}

/// Frozen `f32` forward over a batch, one output per image in input order.
pub fn forward(
    config: &ModelConfig,
    params: &ParamStore,
    batch: &[Image],
) -> Result<Vec<ForwardOutput>> {
    batch
        .par_iter()
        .map(|img| forward_image::<f32>(config, params, img))
        .collect()
}
