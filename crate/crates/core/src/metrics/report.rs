use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nmi::{attention_distance, attention_entropy, nmi_head, Grid};
use super::selection::{
    candidate_layers, classify_pattern, delta_nmi, select_target_layer, Pattern, PatternThresholds,
};
use crate::error::{Error, Result};
use crate::tensor::AttentionStack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    /// 1-based layer index.
    pub layer: usize,
    pub nmi: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub head_nmi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    pub pattern: Pattern,
    pub delta_nmi: f64,
    pub candidate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmiReport {
    pub s: f64,
    pub latter_half_only: bool,
    pub thresholds: PatternThresholds,
    pub images: usize,
    /// `None` for single-layer stacks, where there is nothing to select from.
    pub target_layer: Option<usize>,
    pub layers: Vec<LayerReport>,
}

impl NmiReport {
    pub fn per_layer_nmi(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.nmi).collect()
    }

    pub fn patterns(&self) -> Vec<Pattern> {
        self.layers.iter().map(|l| l.pattern).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Layer NMI, head NMI, mean entropy, mean distance.
type LayerSummary = (f64, Vec<f64>, Option<f64>, Option<f64>);
/// Head NMI, entropy sum, distance sum.
type ImageLayer = (Vec<f64>, f64, Option<f64>);

fn assemble(
    per_layer: Vec<LayerSummary>,
    images: usize,
    s: f64,
    latter_half_only: bool,
    thresholds: PatternThresholds,
) -> Result<NmiReport> {
    let nmi: Vec<f64> = per_layer.iter().map(|l| l.0).collect();
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::config(format!("s must lie in (0, 1), got {s}")));
    }
    let target_layer = match nmi.len() {
        1 => None,
        _ => Some(select_target_layer(&nmi, s, latter_half_only)?),
    };
    let candidates = candidate_layers(nmi.len(), latter_half_only);
    let layers = per_layer
        .into_iter()
        .enumerate()
        .map(|(i, (nmi, head_nmi, entropy, distance))| LayerReport {
            layer: i + 1,
            nmi,
            head_nmi,
            entropy,
            distance,
            pattern: classify_pattern(nmi, &thresholds),
            delta_nmi: delta_nmi(nmi, s),
            candidate: candidates.contains(&(i + 1)),
        })
        .collect();
    Ok(NmiReport {
        s,
        latter_half_only,
        thresholds,
        images,
        target_layer,
        layers,
    })
}

/// Report for a bare per-layer NMI vector (no head or geometry diagnostics).
pub fn report_from_nmi(
    per_layer_nmi: &[f64],
    s: f64,
    latter_half_only: bool,
    thresholds: PatternThresholds,
) -> Result<NmiReport> {
    if let Some(bad) = per_layer_nmi.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::config(format!("NMI value {bad} outside [0, 1]")));
    }
    let per_layer = per_layer_nmi
        .iter()
        .map(|&v| (v, Vec::new(), None, None))
        .collect();
    assemble(per_layer, 0, s, latter_half_only, thresholds)
}

/// Full analysis over the attention of several images.
///
/// Head NMI, entropy and distance are averaged over images; the layer NMI is
/// the mean of the averaged head values. Distance is computed when a grid is
/// given or the token count is a perfect square.
pub fn analyze_stacks(
    stacks: &[AttentionStack],
    grid: Option<Grid>,
    s: f64,
    latter_half_only: bool,
    thresholds: PatternThresholds,
) -> Result<NmiReport> {
    let first = stacks.first().ok_or_else(|| Error::Degenerate {
        op: "analyze_stacks",
        message: "no attention stacks".into(),
    })?;
    let (layers, heads, tokens) = (first.layers(), first.heads(), first.tokens());
    if stacks
        .iter()
        .any(|st| (st.layers(), st.heads(), st.tokens()) != (layers, heads, tokens))
    {
        return Err(Error::shape("attention stacks do not share (L, M, N)"));
    }
    let grid = grid.or_else(|| Grid::square(tokens));

    // [image][layer] -> (head nmi, entropy sum, distance sum)
    let per_image: Vec<Vec<ImageLayer>> = stacks
        .par_iter()
        .map(|st| {
            (0..layers)
                .map(|l| {
                    let mut head_nmi = Vec::with_capacity(heads);
                    let mut entropy = 0.0;
                    let mut distance = grid.map(|_| 0.0);
                    for m in 0..heads {
                        let a = st.head(l, m);
                        head_nmi.push(nmi_head(a)?);
                        entropy += attention_entropy(a)?;
                        if let (Some(g), Some(d)) = (grid, distance.as_mut()) {
                            *d += attention_distance(a, g)?;
                        }
                    }
                    Ok((head_nmi, entropy, distance))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let count = stacks.len() as f64;
    let per_layer = (0..layers)
        .map(|l| {
            let mut head_nmi = vec![0.0; heads];
            let mut entropy = 0.0;
            let mut distance = grid.map(|_| 0.0);
            for image in &per_image {
                let (h, e, d) = &image[l];
                for (acc, v) in head_nmi.iter_mut().zip(h) {
                    *acc += v;
                }
                entropy += e;
                if let (Some(acc), Some(v)) = (distance.as_mut(), d) {
                    *acc += v;
                }
            }
            head_nmi.iter_mut().for_each(|v| *v /= count);
            let nmi = head_nmi.iter().sum::<f64>() / heads as f64;
            let norm = count * heads as f64;
            (
                nmi,
                head_nmi,
                Some(entropy / norm),
                distance.map(|d| d / norm),
            )
        })
        .collect();
    assemble(per_layer, stacks.len(), s, latter_half_only, thresholds)
}
