//! Frozen layered generators with a StyleGAN-shaped interface: a z→w
//! mapping, per-layer w+ codes, truncation and differentiable synthesis.

mod generator;
mod latent;
mod spec;
mod truncation;

pub use generator::{Generator, InitMode};
pub use latent::{AverageLatent, LayeredLatent};
pub use spec::{GeneratorSpec, MarkerSpec};
pub use truncation::{truncate, truncate_adaptive, ADAPTIVE_TRUNCATION};

/// Samples used for `w_avg` unless configured otherwise.
pub const DEFAULT_AVERAGE_SAMPLES: usize = 10_000;
