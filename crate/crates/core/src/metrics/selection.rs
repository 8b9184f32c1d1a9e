use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default selection constant: the centre of the hybrid NMI band.
pub const DEFAULT_S: f64 = 0.09;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Local,
    Hybrid,
    Global,
}

/// NMI band that counts as a hybrid pattern (inclusive on both ends).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternThresholds {
    pub hybrid_low: f64,
    pub hybrid_high: f64,
}

impl Default for PatternThresholds {
    fn default() -> Self {
        Self {
            hybrid_low: 0.06,
            hybrid_high: 0.12,
        }
    }
}

impl PatternThresholds {
    pub fn new(hybrid_low: f64, hybrid_high: f64) -> Result<Self> {
        if !(0.0 < hybrid_low && hybrid_low < hybrid_high && hybrid_high < 1.0) {
            return Err(Error::config(format!(
                "need 0 < hybrid_low < hybrid_high < 1, got {hybrid_low}, {hybrid_high}"
            )));
        }
        Ok(Self {
            hybrid_low,
            hybrid_high,
        })
    }
}

pub fn classify_pattern(nmi: f64, thresholds: &PatternThresholds) -> Pattern {
    if nmi < thresholds.hybrid_low {
        Pattern::Global
    } else if nmi <= thresholds.hybrid_high {
        Pattern::Hybrid
    } else {
        Pattern::Local
    }
}

/// Selection score `-|nmi - s|`.
pub fn delta_nmi(nmi: f64, s: f64) -> f64 {
    -(nmi - s).abs()
}

/// 1-based indices eligible for selection.
pub fn candidate_layers(layers: usize, latter_half_only: bool) -> std::ops::RangeInclusive<usize> {
    if latter_half_only {
        layers / 2 + 1..=layers
    } else {
        1..=layers
    }
}

/// Picks the 1-based layer whose NMI is closest to `s`, breaking ties toward
/// the deepest layer.
pub fn select_target_layer(per_layer_nmi: &[f64], s: f64, latter_half_only: bool) -> Result<usize> {
    let layers = per_layer_nmi.len();
    if layers < 2 {
        return Err(Error::config(format!(
            "layer selection needs at least 2 layers, got {layers}"
        )));
    }
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::config(format!("s must lie in (0, 1), got {s}")));
    }
    let mut best: Option<(usize, f64)> = None;
    for layer in candidate_layers(layers, latter_half_only) {
        let score = delta_nmi(per_layer_nmi[layer - 1], s);
        if best.is_none_or(|(_, b)| score >= b) {
            best = Some((layer, score));
        }
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| Error::config("empty candidate set"))
}
