//! Scores, per-step analysis, the step-skip probe and experiment sweeps.

pub mod analysis;
pub mod metrics;
pub mod stats;
pub mod svg;
pub mod sweep;
