//! Longitudinal cohort analysis around per-channel reference events.

pub mod cohort;
pub mod special;
pub mod transcript;
pub mod stats;
pub mod temporal;
pub mod linalg;
pub mod regression;
pub mod glmm;
pub mod synth;
pub mod matching;
pub mod robustness;
pub mod pipeline;
