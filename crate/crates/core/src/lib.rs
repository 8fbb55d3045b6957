//! Prompted mini vision transformer for visible-infrared person
//! re-identification: a modality-aware prompt library, a generation-based
//! instance prompt generator, staged metric-learning objectives, a synthetic
//! paired-modality benchmark, cross-modality retrieval evaluation, and an
//! ablation harness.

pub mod backbone;
pub mod config;
pub mod error;
pub mod params;
pub mod tensor;
