//! Resolution-agnostic image watermarking by fine-tuning a sinusoidal
//! coordinate network against a frozen, any-resolution message decoder.
//!
//! The pipeline runs in three stages:
//!
//! 1. [`siren::fit_inr`] fits a coordinate network to a raster image.
//! 2. [`codec::pretrain_decoder`] trains an encoder/decoder pair under a
//!    distortion suite and keeps only the decoder.
//! 3. [`finetune::finetune`] adjusts a copy of the fitted network so that
//!    every raster sampled from it, at any resolution, decodes to a chosen
//!    bit message.

pub mod checkpoint;
pub mod codec;
pub mod distortion;
pub mod error;
pub mod finetune;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod sampler;
pub mod siren;
pub mod synth;

pub use crate::codec::{BitMessage, Decoder, Encoder, MessageLogits};
pub use crate::distortion::{DistortionKind, DistortionSpec};
pub use crate::error::{Error, Result};
pub use crate::image::Image;
pub use crate::siren::{InrConfig, InrParams};

/// Deterministic generator used for every stochastic operation.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seed for an independent stream `stream` derived from `root`.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    use rand::{RngCore, SeedableRng};
    let mut rng = Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.next_u64()
}

pub fn seeded_rng(seed: u64) -> Rng {
    rand::SeedableRng::seed_from_u64(seed)
}
