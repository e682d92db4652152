//! Multimodal diagnostic learning core: synthetic cohorts, per-modality
//! classifiers, decision-level fusion, attribution and embedding projection.

pub mod artifact;
pub mod cohort;
pub mod embed;
pub mod explain;
pub mod fusion;
pub mod imageio;
pub mod models;
