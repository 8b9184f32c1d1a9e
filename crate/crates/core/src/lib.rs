//! Attention-pattern analysis and attention distillation for small vision transformers.
//!
//! The crate measures how local or global each attention layer of a teacher is
//! (normalized mutual information between query and key positions), picks the
//! layer whose pattern is closest to a hybrid target, and distills that layer's
//! attention maps into the last layer of a student. It also ships the
//! supporting pieces: dump and checkpoint codecs, linear CKA, a pyramid probe
//! for dense evaluation, and corpus curation tools.

pub mod autograd;
pub mod cka;
pub mod curation;
pub mod data;
pub mod distill;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod probe;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{AttentionStack, DType, FeatureStack, Tensor};
