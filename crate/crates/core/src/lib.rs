//! Conditional flow matching with timestep-segment preference optimization.
//!
//! A small velocity network is trained by flow matching on a synthetic signal
//! family whose quality splits into two separable dimensions (low-band motion
//! and out-of-band fidelity). Two LoRA experts are then tuned on preference
//! pairs, each only inside its own slice of the denoising time axis, and the
//! [`evalsuite`] harness measures what that buys.

pub mod autodiff;
mod linalg;
pub mod par;
pub mod evalsuite;
pub mod flowmatch;
pub mod optim;
pub mod seeds;
pub mod synthgen;
pub mod tpo;
pub mod velonet;
