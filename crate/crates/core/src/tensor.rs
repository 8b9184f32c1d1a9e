//! Shared array containers.
//!
//! [`Tensor`] is the storage type the codecs read and write. Analysis code
//! works on [`AttentionStack`] and [`FeatureStack`], which keep their values
//! in 64-bit form and remember the element width they were created with so a
//! round trip through a dump file is bit-exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row sums of attention matrices.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

/// Row-major array with an explicit element width.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Result<Self> {
        let n = shape.iter().product();
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::F64 => TensorData::F64(vec![0.0; n]),
        };
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Converts to the requested width. A no-op when the width already matches.
    pub fn cast(&self, dtype: DType) -> Tensor {
        let data = match dtype {
            DType::F32 => TensorData::F32(self.to_f32_vec()),
            DType::F64 => TensorData::F64(self.to_f64_vec()),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// Per-layer, per-head attention matrices of one image, shape `[L, M, N, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    layers: usize,
    heads: usize,
    tokens: usize,
    dtype: DType,
    values: Vec<f64>,
}

impl AttentionStack {
    /// Validates shape, entry range and row-stochasticity.
    pub fn new(
        layers: usize,
        heads: usize,
        tokens: usize,
        dtype: DType,
        values: Vec<f64>,
    ) -> Result<Self> {
        if layers == 0 || heads == 0 || tokens == 0 {
            return Err(Error::shape(format!(
                "attention stack needs positive dims, got [{layers}, {heads}, {tokens}, {tokens}]"
            )));
        }
        let expected = layers * heads * tokens * tokens;
        if values.len() != expected {
            return Err(Error::shape(format!(
                "attention stack [{layers}, {heads}, {tokens}, {tokens}] needs {expected} values, got {}",
                values.len()
            )));
        }
        let stack = Self {
            layers,
            heads,
            tokens,
            dtype,
            values,
        };
        for l in 0..layers {
            for m in 0..heads {
                check_row_stochastic(
                    stack.head(l, m),
                    tokens,
                    &format!("layer {} head {}", l + 1, m + 1),
                )?;
            }
        }
        Ok(stack)
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        match tensor.shape() {
            &[l, m, n, n2] if n == n2 => Self::new(l, m, n, tensor.dtype(), tensor.to_f64_vec()),
            other => Err(Error::shape(format!(
                "attention tensor must be [L, M, N, N], got {other:?}"
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let shape = vec![self.layers, self.heads, self.tokens, self.tokens];
        let data = match self.dtype {
            DType::F64 => TensorData::F64(self.values.clone()),
            DType::F32 => TensorData::F32(self.values.iter().map(|&x| x as f32).collect()),
        };
        Tensor { shape, data }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row-major `N x N` matrix of head `head` in layer `layer` (both 0-based).
    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        let nn = self.tokens * self.tokens;
        let start = (layer * self.heads + head) * nn;
        &self.values[start..start + nn]
    }

    /// All heads of one layer as a contiguous `[M, N, N]` slice.
    pub fn layer(&self, layer: usize) -> &[f64] {
        let block = self.heads * self.tokens * self.tokens;
        &self.values[layer * block..(layer + 1) * block]
    }
}

/// Checks that each of the `n` rows of `matrix` is a probability vector.
pub fn check_row_stochastic(matrix: &[f64], n: usize, context: &str) -> Result<()> {
    if matrix.len() != n * n {
        return Err(Error::shape(format!(
            "{context}: expected {n}x{n} matrix, got {} values",
            matrix.len()
        )));
    }
    for (row, values) in matrix.chunks_exact(n).enumerate() {
        let mut sum = 0.0;
        for &v in values {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::NotStochastic {
                    context: context.to_string(),
                    row,
                    sum: values.iter().sum(),
                });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::NotStochastic {
                context: context.to_string(),
                row,
                sum,
            });
        }
    }
    Ok(())
}

/// Per-layer token features of one image, shape `[layers, N, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    layers: usize,
    tokens: usize,
    dim: usize,
    dtype: DType,
    values: Vec<f64>,
}

impl FeatureStack {
    pub fn new(
        layers: usize,
        tokens: usize,
        dim: usize,
        dtype: DType,
        values: Vec<f64>,
    ) -> Result<Self> {
        if layers == 0 || tokens == 0 || dim == 0 {
            return Err(Error::shape(format!(
                "feature stack needs positive dims, got [{layers}, {tokens}, {dim}]"
            )));
        }
        if values.len() != layers * tokens * dim {
            return Err(Error::shape(format!(
                "feature stack [{layers}, {tokens}, {dim}] needs {} values, got {}",
                layers * tokens * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate {
                op: "feature_stack",
                message: "non-finite feature value".into(),
            });
        }
        Ok(Self {
            layers,
            tokens,
            dim,
            dtype,
            values,
        })
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        match tensor.shape() {
            &[l, n, d] => Self::new(l, n, d, tensor.dtype(), tensor.to_f64_vec()),
            other => Err(Error::shape(format!(
                "feature tensor must be [layers, N, D], got {other:?}"
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let shape = vec![self.layers, self.tokens, self.dim];
        let data = match self.dtype {
            DType::F64 => TensorData::F64(self.values.clone()),
            DType::F32 => TensorData::F32(self.values.iter().map(|&x| x as f32).collect()),
        };
        Tensor { shape, data }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row-major `N x D` features of one layer (0-based).
    pub fn layer(&self, layer: usize) -> &[f64] {
        let block = self.tokens * self.dim;
        &self.values[layer * block..(layer + 1) * block]
    }
}
