//! Training-free concept swapping for latent diffusion models.
//!
//! The crate is organized around a [`backend::DenoiserBackend`] trait. The
//! bundled [`backend::ToyBackend`] is a small deterministic denoiser with
//! closed-form fixed points, used for tests and demos.

pub mod backend;
pub mod bboxgen;
pub mod distill;
pub mod error;
pub mod eval;
pub mod latent;
pub mod pipeline;
pub mod pixels;
pub mod secr;
pub mod ssgu;

pub use backend::{BackendConfig, DenoiserBackend, ToyBackend, ToyConfig};
pub use bboxgen::{generate_bbox, BBox};
pub use error::{Result, SwapError};
pub use latent::{LatentDims, LatentImage};
pub use pipeline::{insert, multi_swap, remove, swap, ConceptSpec, SwapConfig, SwapResult};
pub use pixels::PixelImage;
