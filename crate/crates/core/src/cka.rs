//! Linear centered kernel alignment between two feature matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dgemm;
use crate::tensor::FeatureStack;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CkaResult {
    pub value: f64,
    pub n_examples: usize,
    pub dims: (usize, usize),
}

fn centered(x: &[f64], n: usize, d: usize, op: &'static str) -> Result<Vec<f64>> {
    let mut means = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = Vec::with_capacity(x.len());
    let (mut raw, mut centred) = (0.0, 0.0);
    for row in x.chunks_exact(d) {
        for (v, m) in row.iter().zip(&means) {
            if !v.is_finite() {
                return Err(Error::Degenerate {
                    op,
                    message: "non-finite feature".into(),
                });
            }
            let c = v - m;
            raw += v * v;
            centred += c * c;
            out.push(c);
        }
    }
    // Constant columns leave rounding residue after centering; treat a
    // relative residue below 1e-24 as zero variance.
    if centred == 0.0 || centred <= 1e-24 * raw {
        return Err(Error::Degenerate {
            op,
            message: "feature matrix has zero variance".into(),
        });
    }
    Ok(out)
}

fn frob_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Linear CKA, `||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F)`.
///
/// `x` is `n x da` and `y` is `n x db`, both row-major with one example per row.
pub fn linear_cka(x: &[f64], da: usize, y: &[f64], db: usize) -> Result<CkaResult> {
    if da == 0 || db == 0 || !x.len().is_multiple_of(da) || !y.len().is_multiple_of(db) {
        return Err(Error::shape("feature buffers are not whole rows"));
    }
    let n = x.len() / da;
    if y.len() / db != n {
        return Err(Error::shape(format!(
            "X has {n} examples, Y has {}",
            y.len() / db
        )));
    }
    if n < 3 {
        return Err(Error::Degenerate {
            op: "linear_cka",
            message: format!("need at least 3 examples, got {n}"),
        });
    }
    let xc = centered(x, n, da, "linear_cka")?;
    let yc = centered(y, n, db, "linear_cka")?;

    let mut xy = vec![0.0; db * da];
    dgemm(db, n, da, 1.0, &yc, true, &xc, false, 0.0, &mut xy);
    let mut xx = vec![0.0; da * da];
    dgemm(da, n, da, 1.0, &xc, true, &xc, false, 0.0, &mut xx);
    let mut yy = vec![0.0; db * db];
    dgemm(db, n, db, 1.0, &yc, true, &yc, false, 0.0, &mut yy);

    let denom = frob_sq(&xx).sqrt() * frob_sq(&yy).sqrt();
    let value = (frob_sq(&xy) / denom).clamp(0.0, 1.0);
    Ok(CkaResult {
        value,
        n_examples: n,
        dims: (da, db),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Concatenate tokens of all images, then one CKA per layer pair.
    Pooled,
    /// One CKA per image, averaged.
    PerImage,
}

/// `L_a x L_b` grid of CKA values between layers of two models seen on the
/// same images (`a[i]` and `b[i]` must come from the same image).
pub fn cka_grid(a: &[FeatureStack], b: &[FeatureStack], pooling: Pooling) -> Result<Vec<Vec<f64>>> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::shape(format!(
            "need the same nonzero number of images, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (la, da, lb, db) = (a[0].layers(), a[0].dim(), b[0].layers(), b[0].dim());
    for (fa, fb) in a.iter().zip(b) {
        if fa.layers() != la || fa.dim() != da || fb.layers() != lb || fb.dim() != db {
            return Err(Error::shape("feature stacks do not share layers/dim"));
        }
        if fa.tokens() != fb.tokens() {
            return Err(Error::shape("paired feature stacks differ in token count"));
        }
    }
    let mut grid = vec![vec![0.0; lb]; la];
    for (i, row) in grid.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = match pooling {
                Pooling::Pooled => {
                    let x: Vec<f64> = a.iter().flat_map(|f| f.layer(i).iter().copied()).collect();
                    let y: Vec<f64> = b.iter().flat_map(|f| f.layer(j).iter().copied()).collect();
                    linear_cka(&x, da, &y, db)?.value
                }
                Pooling::PerImage => {
                    let mut acc = 0.0;
                    for (fa, fb) in a.iter().zip(b) {
                        acc += linear_cka(fa.layer(i), da, fb.layer(j), db)?.value;
                    }
                    acc / a.len() as f64
                }
            };
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_similarity_is_one() {
        let x = [1.0, 2.0, 0.5, -1.0, 3.0, 0.0, 2.0, 2.0];
        let r = linear_cka(&x, 2, &x, 2).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
        assert_eq!(r.n_examples, 4);
        assert_eq!(r.dims, (2, 2));
    }

    #[test]
    fn degenerate_inputs() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let constant = [7.0; 6];
        assert!(matches!(
            linear_cka(&x, 2, &constant, 2),
            Err(Error::Degenerate { .. })
        ));
        assert!(matches!(
            linear_cka(&x[..4], 2, &x[..4], 2),
            Err(Error::Degenerate { .. })
        ));
        assert!(linear_cka(&x, 2, &x, 3).is_err());
    }
}
