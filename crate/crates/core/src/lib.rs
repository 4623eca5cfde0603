//! Flow-matching ODE sampling with velocity-adaptive classifier-free guidance.
//!
//! The guidance scale at each Euler step is `lambda * exp(kappa * (2 sigma - 1) * s)`,
//! with `sigma = 1 - t` and `s` the cosine between two velocities the sampler
//! already computes: unconditional vs conditional for generation, and
//! source-guided vs pilot target velocity for inversion-free editing.
//! Velocity fields are analytic Gaussian-mixture flows, so every result can
//! be checked against closed forms or a Monte-Carlo oracle.

pub mod cli;
pub mod diagnostics;
pub mod editor;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod sampler;
pub mod vecmath;
pub mod velocity;

pub use error::{Error, Result};
pub use vecmath::LatentVector;
