//! Desk-scale toolkit for data-constrained text-to-image diffusion training:
//! structured CutMix and crop augmentations, the timestep-gated batch
//! sampler, a small gradient-checked denoiser, and evaluation metrics.
//!
//! Work that fans out over independent items (curation, batch slots,
//! per-sample gradients, pairwise distances, ablation points) runs on rayon
//! when the default `parallel` feature is on. Every item draws from its own
//! seed-derived stream and results are reduced in index order, so outputs are
//! identical with and without the feature and for any thread count.

pub mod ablate;
pub mod captioner;
pub mod config;
pub mod cropaug;
pub mod cutmix;
pub mod data;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod par;
pub mod raster;
pub mod rng;
pub mod schedule;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
