//! Attention-pattern analysis: NMI, entropy, distance, pattern taxonomy and
//! distillation target selection.

mod nmi;
mod report;
mod selection;

pub use nmi::{
    attention_distance, attention_entropy, dataset_nmi, nmi_head, nmi_heads_by_layer, nmi_layer,
    Grid,
};
pub use report::{analyze_stacks, report_from_nmi, LayerReport, NmiReport};
pub use selection::{
    candidate_layers, classify_pattern, delta_nmi, select_target_layer, Pattern, PatternThresholds,
    DEFAULT_S,
};
