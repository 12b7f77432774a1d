//! Multimodal self-supervised contrastive learning at desk scale.

pub mod config;
pub mod datasets;
pub mod model;
pub mod ndgrad;
pub mod objectives;
pub mod report;
pub mod rng;
pub mod simsuite;
pub mod trainer;
