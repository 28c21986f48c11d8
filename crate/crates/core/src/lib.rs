//! Paired diffusion on 2D synthetic phantoms.
//!
//! Two co-evolving noise-prediction models (a lesion branch and a brain
//! branch) are trained jointly so that each conditions on the other's
//! one-step denoised estimate. On top of the paired sampler sit four tasks:
//! unconditional generation of (lesion mask, brain image) pairs, conditional
//! image generation from a given mask, and bidirectional pathology/healthy
//! editing driven by anatomy- and lesion-consistency guidance. Everything
//! runs against procedurally generated brain-like phantoms so the whole
//! pipeline is verifiable on a desk, with analytic oracles for the sampler
//! math and distribution metrics for the rest.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod denoiser;
pub mod editing;
mod error;
pub mod field;
pub mod metrics;
pub mod paired;
pub mod parallel;
pub mod pgm;
pub mod phantom;
pub mod rng;
pub mod schedule;
pub mod trainer;
pub mod ubt;

pub use error::{Error, Result};
pub use field::{BinaryMask, Field};
pub use rng::Stream;
pub use schedule::{InferenceTimeline, NoiseSchedule};
