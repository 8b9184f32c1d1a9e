//! Information measures over a single attention matrix.
//!
//! Each row of an `N x N` attention matrix is read as `p(k | q_i)`. With a
//! uniform query marginal `p(q_i) = 1/N`, the matrix defines the joint table
//! `p(q_i, k_j) = A[i, j] / N`, whose normalized mutual information separates
//! query-specific (local) attention from query-independent (global) attention.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{check_row_stochastic, AttentionStack};

/// Token layout of a square or rectangular patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    /// The square grid with `tokens` cells, if there is one.
    pub fn square(tokens: usize) -> Option<Self> {
        let side = (tokens as f64).sqrt().round() as usize;
        (side * side == tokens).then_some(Self::new(side, side))
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }
}

fn token_count(a: &[f64]) -> Result<usize> {
    let n = (a.len() as f64).sqrt().round() as usize;
    if n * n != a.len() {
        return Err(Error::shape(format!(
            "{} values do not form a square matrix",
            a.len()
        )));
    }
    Ok(n)
}

/// Normalized mutual information `I(Q;K) / sqrt(H(Q) H(K))` of one head.
///
/// Zero-probability terms contribute nothing. Matrices whose rows are all
/// identical make queries and keys independent and return exactly 0; the
/// identity (and any permutation matrix) returns exactly 1.
pub fn nmi_head(a: &[f64]) -> Result<f64> {
    let n = token_count(a)?;
    if n < 2 {
        return Err(Error::Degenerate {
            op: "nmi_head",
            message: "NMI needs at least 2 tokens (H(Q) = 0)".into(),
        });
    }
    check_row_stochastic(a, n, "attention matrix")?;

    let first = &a[..n];
    if a.chunks_exact(n).all(|row| row == first) {
        return Ok(0.0);
    }

    let nf = n as f64;
    let mut col_sum = vec![0.0; n];
    for row in a.chunks_exact(n) {
        for (c, &v) in col_sum.iter_mut().zip(row) {
            *c += v;
        }
    }

    // Every term below is p * ln(ratio) with matching association so that
    // the identity case produces three bitwise-equal sums.
    let mut mutual = 0.0;
    for row in a.chunks_exact(n) {
        for (&v, &c) in row.iter().zip(&col_sum) {
            if v > 0.0 {
                mutual += (v / nf) * (nf * v / c).ln();
            }
        }
    }
    let mut h_key = 0.0;
    for &c in &col_sum {
        if c > 0.0 {
            h_key += (c / nf) * (nf / c).ln();
        }
    }
    let mut h_query = 0.0;
    for _ in 0..n {
        h_query += (1.0 / nf) * nf.ln();
    }

    if h_key <= 0.0 {
        return Ok(0.0);
    }
    let nmi = mutual / (h_query * h_key).sqrt();
    Ok(nmi.clamp(0.0, 1.0))
}

/// Mean NMI over the heads of one layer. `heads` holds `M` consecutive `N x N` matrices.
pub fn nmi_layer(heads: &[f64], tokens: usize) -> Result<f64> {
    let nn = tokens * tokens;
    if nn == 0 || heads.is_empty() || !heads.len().is_multiple_of(nn) {
        return Err(Error::shape(format!(
            "{} values are not a whole number of {tokens}x{tokens} heads",
            heads.len()
        )));
    }
    let per_head = heads
        .chunks_exact(nn)
        .map(nmi_head)
        .collect::<Result<Vec<_>>>()?;
    Ok(per_head.iter().sum::<f64>() / per_head.len() as f64)
}

/// Per-head NMI of every layer: `[L][M]`.
pub fn nmi_heads_by_layer(stack: &AttentionStack) -> Result<Vec<Vec<f64>>> {
    (0..stack.layers())
        .map(|l| {
            (0..stack.heads())
                .map(|m| nmi_head(stack.head(l, m)))
                .collect()
        })
        .collect()
}

/// Layer NMI averaged over images. Each image contributes its own per-layer mean.
pub fn dataset_nmi(stacks: &[AttentionStack]) -> Result<Vec<f64>> {
    let first = stacks.first().ok_or_else(|| Error::Degenerate {
        op: "dataset_nmi",
        message: "no attention stacks".into(),
    })?;
    let dims = (first.layers(), first.heads(), first.tokens());
    if let Some(bad) = stacks
        .iter()
        .position(|s| (s.layers(), s.heads(), s.tokens()) != dims)
    {
        return Err(Error::shape(format!(
            "stack {bad} does not share (L, M, N) = {dims:?}"
        )));
    }
    let per_image: Vec<Vec<f64>> = stacks
        .par_iter()
        .map(|s| {
            (0..s.layers())
                .map(|l| nmi_layer(s.layer(l), s.tokens()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut mean = vec![0.0; dims.0];
    for image in &per_image {
        for (m, v) in mean.iter_mut().zip(image) {
            *m += v;
        }
    }
    let count = per_image.len() as f64;
    Ok(mean.into_iter().map(|m| m / count).collect())
}

/// Mean Shannon entropy of the rows, in nats.
pub fn attention_entropy(a: &[f64]) -> Result<f64> {
    let n = token_count(a)?;
    check_row_stochastic(a, n, "attention matrix")?;
    let total: f64 = a
        .chunks_exact(n)
        .map(|row| {
            row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean attention-weighted Euclidean distance between query and key cells.
pub fn attention_distance(a: &[f64], grid: Grid) -> Result<f64> {
    let n = token_count(a)?;
    if grid.tokens() != n {
        return Err(Error::shape(format!(
            "grid {}x{} has {} cells, attention has {n} tokens",
            grid.rows,
            grid.cols,
            grid.tokens()
        )));
    }
    check_row_stochastic(a, n, "attention matrix")?;
    let pos = |t: usize| ((t / grid.cols) as f64, (t % grid.cols) as f64);
    let mut total = 0.0;
    for (i, row) in a.chunks_exact(n).enumerate() {
        let (ri, ci) = pos(i);
        for (j, &w) in row.iter().enumerate() {
            if w > 0.0 {
                let (rj, cj) = pos(j);
                total += w * (ri - rj).hypot(ci - cj);
            }
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(n: usize) -> Vec<f64> {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        a
    }

    #[test]
    fn extremes() {
        assert_eq!(nmi_head(&identity(4)).unwrap(), 1.0);
        assert_eq!(nmi_head(&[0.25; 16]).unwrap(), 0.0);
    }

    #[test]
    fn all_mass_on_one_key_is_global() {
        let mut a = vec![0.0; 9];
        for i in 0..3 {
            a[i * 3 + 1] = 1.0;
        }
        assert_eq!(nmi_head(&a).unwrap(), 0.0);
    }

    #[test]
    fn permutation_matrix_is_local() {
        let a = [0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        assert_eq!(nmi_head(&a).unwrap(), 1.0);
    }

    #[test]
    fn rejects_single_token_and_bad_rows() {
        assert!(matches!(nmi_head(&[1.0]), Err(Error::Degenerate { .. })));
        assert!(matches!(
            nmi_head(&[0.6, 0.6, 0.5, 0.5]),
            Err(Error::NotStochastic { row: 0, .. })
        ));
        assert!(nmi_head(&[0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn layer_of_identity_and_uniform_is_half() {
        let mut heads = identity(4);
        heads.extend_from_slice(&[0.25; 16]);
        assert_eq!(nmi_layer(&heads, 4).unwrap(), 0.5);
        assert_eq!(
            nmi_layer(&identity(3), 3).unwrap(),
            nmi_head(&identity(3)).unwrap()
        );
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(attention_entropy(&identity(5)).unwrap(), 0.0);
        assert!((attention_entropy(&[0.25; 16]).unwrap() - 4f64.ln()).abs() < 1e-12);
        // rows: one-hot (0 nats) and uniform over 2 (ln 2)
        let a = [1.0, 0.0, 0.5, 0.5];
        assert!((attention_entropy(&a).unwrap() - 2f64.ln() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn distance_cases() {
        assert_eq!(
            attention_distance(&identity(4), Grid::new(2, 2)).unwrap(),
            0.0
        );
        assert_eq!(attention_distance(&[0.5; 4], Grid::new(1, 2)).unwrap(), 0.5);
        assert!(attention_distance(&[0.5; 4], Grid::new(2, 2)).is_err());
    }

    #[test]
    fn dataset_nmi_averages_images() {
        let a = AttentionStack::new(1, 1, 2, crate::tensor::DType::F64, identity(2)).unwrap();
        let b = AttentionStack::new(1, 1, 2, crate::tensor::DType::F64, vec![0.5; 4]).unwrap();
        assert_eq!(dataset_nmi(std::slice::from_ref(&a)).unwrap(), vec![1.0]);
        assert_eq!(dataset_nmi(&[a, b]).unwrap(), vec![0.5]);
        assert!(dataset_nmi(&[]).is_err());
    }
}
