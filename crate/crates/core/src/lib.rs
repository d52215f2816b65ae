//! Single-image fine-tuning and guided sampling for a tiny text-conditioned
//! diffusion model.

pub mod checkpoint;
pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod image;
pub mod imageio;
pub mod nn;
pub mod postprocess;
pub mod sampler;
pub mod schedule;
pub mod text_cond;
pub mod trainer;
mod util;

pub use checkpoint::{Checkpoint, Provenance};
pub use error::{Error, Result};
pub use image::Image;
pub use util::rng_stream;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/schedule.md")]
    struct Schedule;
    #[doc = include_str!("../../../book/src/conditioning.md")]
    struct Conditioning;
    #[doc = include_str!("../../../book/src/denoiser.md")]
    struct DenoiserChapter;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/sampling.md")]
    struct Sampling;
    #[doc = include_str!("../../../book/src/interpolation.md")]
    struct Interpolation;
    #[doc = include_str!("../../../book/src/harness.md")]
    struct Harness;
    #[doc = include_str!("../../../book/src/acceptance.md")]
    struct Acceptance;
}
