//! Dense evaluation heads on frozen features: the four-scale pyramid, linear
//! probing at quarter resolution, and mean IoU.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::model::{
    adamw_step, batch_gradients, forward, lr_at, truncated_normal, AdamWConfig, ModelConfig,
    OptimizerState, ParamStore, Schedule, INIT_STD,
};
use crate::tensor::{FeatureStack, Tensor};

/// Interleaved `height x width x channels` map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels || height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "feature map {height}x{width}x{channels} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Token features of one layer laid out on the patch grid.
    pub fn from_layer(features: &FeatureStack, layer: usize, grid: (usize, usize)) -> Result<Self> {
        if layer == 0 || layer > features.layers() {
            return Err(Error::config(format!(
                "layer {layer} outside 1..={}",
                features.layers()
            )));
        }
        if grid.0 * grid.1 != features.tokens() {
            return Err(Error::shape(format!(
                "grid {}x{} does not hold {} tokens",
                grid.0,
                grid.1,
                features.tokens()
            )));
        }
        Self::new(
            grid.0,
            grid.1,
            features.dim(),
            features.layer(layer - 1).to_vec(),
        )
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear resize with corner-aligned sampling.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> FeatureMap {
        let coord = |i: usize, out: usize, inp: usize| {
            if out == 1 || inp == 1 {
                0.0
            } else {
                i as f64 * (inp - 1) as f64 / (out - 1) as f64
            }
        };
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            let sy = coord(y, height, self.height);
            let y0 = (sy.floor() as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = sy - y0 as f64;
            for x in 0..width {
                let sx = coord(x, width, self.width);
                let x0 = (sx.floor() as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = sx - x0 as f64;
                let (a, b, c, d) = (
                    self.at(y0, x0),
                    self.at(y0, x1),
                    self.at(y1, x0),
                    self.at(y1, x1),
                );
                for ch in 0..self.channels {
                    let top = a[ch] + (b[ch] - a[ch]) * fx;
                    let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                    data.push(top + (bottom - top) * fy);
                }
            }
        }
        FeatureMap {
            height,
            width,
            channels: self.channels,
            data,
        }
    }

    /// Kernel-2, stride-2 max pooling.
    pub fn max_pool2(&self) -> Result<FeatureMap> {
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "cannot pool a {}x{} map by 2",
                self.height, self.width
            )));
        }
        let (h, w, c) = (self.height / 2, self.width / 2, self.channels);
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| self.at(2 * y + dy, 2 * x + dx)[ch])
                        .fold(f64::NEG_INFINITY, f64::max);
                    data.push(v);
                }
            }
        }
        FeatureMap::new(h, w, c, data)
    }

    /// Concatenates channels of equally sized maps.
    pub fn concat(maps: &[FeatureMap]) -> Result<FeatureMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::config("nothing to concatenate"))?;
        let (h, w) = (first.height, first.width);
        if maps.iter().any(|m| (m.height, m.width) != (h, w)) {
            return Err(Error::shape(
                "maps to concatenate differ in size".to_string(),
            ));
        }
        let channels = maps.iter().map(|m| m.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for y in 0..h {
            for x in 0..w {
                for m in maps {
                    data.extend_from_slice(m.at(y, x));
                }
            }
        }
        FeatureMap::new(h, w, channels, data)
    }
}

/// Kernel-2, stride-2 transposed convolution, channel preserving.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv2 {
    pub channels: usize,
    /// Indexed `[in][out][dy][dx]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Deconv2 {
    /// Each input pixel copied to its 2x2 output block.
    pub fn identity(channels: usize) -> Self {
        let mut weight = vec![0.0; channels * channels * 4];
        for c in 0..channels {
            for k in 0..4 {
                weight[(c * channels + c) * 4 + k] = 1.0;
            }
        }
        Self {
            channels,
            weight,
            bias: vec![0.0; channels],
        }
    }

    pub fn apply(&self, input: &FeatureMap) -> Result<FeatureMap> {
        let c = self.channels;
        if input.channels != c || self.weight.len() != c * c * 4 || self.bias.len() != c {
            return Err(Error::shape(format!(
                "deconvolution for {c} channels applied to {} channels",
                input.channels
            )));
        }
        let (h, w) = (input.height * 2, input.width * 2);
        let mut data = vec![0.0; h * w * c];
        for y in 0..input.height {
            for x in 0..input.width {
                let px = input.at(y, x);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let out = &mut data[((2 * y + dy) * w + 2 * x + dx) * c..][..c];
                        out.copy_from_slice(&self.bias);
                        for (ci, &v) in px.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            for (co, o) in out.iter_mut().enumerate() {
                                *o += v * self.weight[((ci * c + co) * 2 + dy) * 2 + dx];
                            }
                        }
                    }
                }
            }
        }
        FeatureMap::new(h, w, c, data)
    }
}

/// Which layer feeds each of the four pyramid branches (1-based), finest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub source_layers: [usize; 4],
}

impl PyramidConfig {
    /// All four branches read the last layer.
    pub fn last_layer(depth: usize) -> Self {
        Self {
            source_layers: [depth; 4],
        }
    }

    /// Four distinct depths; `layers` must be within `1..=depth`.
    pub fn multi_layer(layers: [usize; 4], depth: usize) -> Result<Self> {
        if let Some(bad) = layers.iter().find(|&&l| l == 0 || l > depth) {
            return Err(Error::config(format!(
                "pyramid layer {bad} outside 1..={depth}"
            )));
        }
        Ok(Self {
            source_layers: layers,
        })
    }

    /// Layers at one third, one half, two thirds and all of the depth.
    pub fn default_layers(depth: usize) -> [usize; 4] {
        [
            (depth / 3).max(1),
            (depth / 2).max(1),
            (2 * depth / 3).max(1),
            depth,
        ]
    }

    pub fn is_last_layer(&self, depth: usize) -> bool {
        self.source_layers.iter().all(|&l| l == depth)
    }
}

/// Learned pieces of the pyramid; identity transposed convolutions by default.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidParams {
    /// Two stacked upsamplers of the finest branch.
    pub up4: [Deconv2; 2],
    pub up8: Deconv2,
}

impl PyramidParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            up4: [Deconv2::identity(channels), Deconv2::identity(channels)],
            up8: Deconv2::identity(channels),
        }
    }
}

/// Four maps at 1/4, 1/8, 1/16 and 1/32 of the input for patch-16 tokens.
pub fn build_pyramid(
    features: &FeatureStack,
    config: &PyramidConfig,
    grid: (usize, usize),
    params: &PyramidParams,
) -> Result<[FeatureMap; 4]> {
    let map = |layer| FeatureMap::from_layer(features, layer, grid);
    let [l4, l8, l16, l32] = config.source_layers;
    let up4 = params.up4[1].apply(&params.up4[0].apply(&map(l4)?)?)?;
    let up8 = params.up8.apply(&map(l8)?)?;
    let same = map(l16)?;
    let down = map(l32)?.max_pool2()?;
    Ok([up4, up8, same, down])
}

/// Linear per-pixel classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub in_channels: usize,
    pub classes: usize,
    /// `in_channels x classes`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProbeHead {
    pub fn init(in_channels: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            in_channels,
            classes,
            weight: truncated_normal(&mut rng, in_channels * classes, INIT_STD)
                .into_iter()
                .map(f64::from)
                .collect(),
            bias: vec![0.0; classes],
        }
    }

    pub fn apply(&self, input: &FeatureMap) -> Result<Vec<f64>> {
        if input.channels != self.in_channels {
            return Err(Error::shape(format!(
                "probe head expects {} channels, input has {}",
                self.in_channels, input.channels
            )));
        }
        let pixels = input.height * input.width;
        let mut out = Vec::with_capacity(pixels * self.classes);
        for p in 0..pixels {
            let px = &input.data[p * self.in_channels..(p + 1) * self.in_channels];
            for k in 0..self.classes {
                let mut v = self.bias[k];
                for (c, &x) in px.iter().enumerate() {
                    v += x * self.weight[c * self.classes + k];
                }
                out.push(v);
            }
        }
        Ok(out)
    }
}

/// Probe input construction, one per evaluation architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMode {
    /// Pyramid from the last layer only.
    LlFpn,
    /// Pyramid from four depths.
    MultiLayer([usize; 4]),
    /// Several layers resized and concatenated.
    Lp(Vec<usize>),
    /// A single layer.
    Layerwise(usize),
}

/// Builds the `(H/4) x (W/4) x C` probe input of one image.
pub fn probe_input(
    features: &FeatureStack,
    grid: (usize, usize),
    mode: &ProbeMode,
    out: (usize, usize),
) -> Result<FeatureMap> {
    let depth = features.layers();
    let maps: Vec<FeatureMap> = match mode {
        ProbeMode::LlFpn | ProbeMode::MultiLayer(_) => {
            let config = match mode {
                ProbeMode::MultiLayer(layers) => PyramidConfig::multi_layer(*layers, depth)?,
                _ => PyramidConfig::last_layer(depth),
            };
            build_pyramid(
                features,
                &config,
                grid,
                &PyramidParams::identity(features.dim()),
            )?
            .into()
        }
        ProbeMode::Lp(layers) => {
            if layers.is_empty() {
                return Err(Error::config("linear probing needs at least one layer"));
            }
            layers
                .iter()
                .map(|&l| FeatureMap::from_layer(features, l, grid))
                .collect::<Result<_>>()?
        }
        ProbeMode::Layerwise(l) => vec![FeatureMap::from_layer(features, *l, grid)?],
    };
    let resized: Vec<FeatureMap> = maps
        .iter()
        .map(|m| m.resize_bilinear(out.0, out.1))
        .collect();
    FeatureMap::concat(&resized)
}

/// Logits at quarter resolution for the probed layers, `pixels x classes`.
pub fn probe_forward(
    features: &FeatureStack,
    grid: (usize, usize),
    layers: &[usize],
    head: &ProbeHead,
    out: (usize, usize),
) -> Result<Vec<f64>> {
    let input = probe_input(features, grid, &ProbeMode::Lp(layers.to_vec()), out)?;
    head.apply(&input)
}

/// Intersection over union per class and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and target.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(pred: &[usize], target: &[usize], classes: usize) -> Result<IouReport> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(target) {
        if p >= classes || t >= classes {
            return Err(Error::shape(format!("label outside {classes} classes")));
        }
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|k| (union[k] > 0).then(|| inter[k] as f64 / union[k] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Degenerate {
            op: "miou",
            message: "no class present".into(),
        });
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub head: ProbeHead,
    pub iou: IouReport,
    pub step_loss: Vec<f64>,
}

/// Input stride of the probe relative to the image.
pub const PROBE_STRIDE: usize = 4;

fn prepare(
    config: &ModelConfig,
    params: &ParamStore,
    items: &[LabeledImage],
    mode: &ProbeMode,
    classes: usize,
) -> Result<Vec<(FeatureMap, Vec<usize>)>> {
    let (h, w) = config.image;
    if h % PROBE_STRIDE != 0 || w % PROBE_STRIDE != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} is not divisible by {PROBE_STRIDE}"
        )));
    }
    let out = (h / PROBE_STRIDE, w / PROBE_STRIDE);
    let images: Vec<_> = items.iter().map(|i| i.image.clone()).collect();
    let outputs = forward(config, params, &images)?;
    outputs
        .iter()
        .zip(items)
        .map(|(o, item)| {
            let input = probe_input(&o.features, config.grid(), mode, out)?;
            Ok((input, item.patch_labels(PROBE_STRIDE, classes)?))
        })
        .collect()
}

/// Trains only a linear head on frozen backbone features and scores it on `heldout`.
pub fn train_probe(
    config: &ModelConfig,
    params: &ParamStore,
    train: &[LabeledImage],
    heldout: &[LabeledImage],
    mode: &ProbeMode,
    settings: &ProbeSettings,
) -> Result<ProbeResult> {
    if train.is_empty() || heldout.is_empty() || settings.batch_size == 0 || settings.classes < 2 {
        return Err(Error::config(
            "probe training needs data, a positive batch size and two classes",
        ));
    }
    let k = settings.classes;
    let train_set = prepare(config, params, train, mode, k)?;
    let held_set = prepare(config, params, heldout, mode, k)?;
    let channels = train_set[0].0.channels;
    let pixels = train_set[0].0.height * train_set[0].0.width;

    let init = ProbeHead::init(channels, k, settings.seed);
    let mut head_params = ParamStore::new();
    head_params.insert(
        "weight".into(),
        Tensor::from_f32(
            vec![channels, k],
            init.weight.iter().map(|&v| v as f32).collect(),
        )?,
    );
    head_params.insert("bias".into(), Tensor::from_f32(vec![1, k], vec![0.0; k])?);

    let inputs: Vec<Matrix<f32>> = train_set
        .iter()
        .map(|(m, _)| Matrix::new(pixels, channels, m.data.iter().map(|&v| v as f32).collect()))
        .collect();
    let targets: Vec<Matrix<f32>> = train_set
        .iter()
        .map(|(_, labels)| {
            let mut t = Matrix::zeros(pixels, k);
            for (p, &l) in labels.iter().enumerate() {
                t.data[p * k + l] = 1.0;
            }
            t
        })
        .collect();

    let steps_per_epoch = train_set.len().div_ceil(settings.batch_size);
    let schedule = Schedule {
        base_lr: settings.base_lr,
        batch_size: settings.batch_size,
        warmup_steps: 0,
        total_steps: settings.epochs * steps_per_epoch,
    };
    let mut state = OptimizerState::new(settings.optimizer, &head_params);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step_loss = Vec::with_capacity(schedule.total_steps);
    let mut step = 0;
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch_size) {
            let (loss, grads) = batch_gradients(&head_params, chunk.len(), |i, tape, vars| {
                let x = tape.constant(inputs[chunk[i]].clone());
                let logits = tape.matmul(x, vars["weight"]);
                let logits = tape.add_row(logits, vars["bias"]);
                let xent = tape.soft_target_xent(logits, targets[chunk[i]].clone());
                Ok(tape.affine(xent, 1.0 / pixels as f64, 0.0))
            })
            .map_err(|e| match e {
                Error::Degenerate { op: "grad", .. } => Error::Diverged { step },
                other => other,
            })?;
            adamw_step(&mut head_params, &grads, &mut state, lr_at(step, &schedule))?;
            step_loss.push(loss);
            step += 1;
        }
    }

    let head = ProbeHead {
        in_channels: channels,
        classes: k,
        weight: head_params["weight"].to_f64_vec(),
        bias: head_params["bias"].to_f64_vec(),
    };
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (input, labels) in &held_set {
        let logits = head.apply(input)?;
        pred.extend(
            logits
                .chunks(k)
                .map(|row| (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b })),
        );
        truth.extend_from_slice(labels);
    }
    Ok(ProbeResult {
        head,
        iou: miou(&pred, &truth, k)?,
        step_loss,
    })
}
