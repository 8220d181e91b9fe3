//! Signal models and post-processing for coarse-to-fine cardiac diffusion-weighted
//! MRI reconstruction.
//!
//! The crate covers everything outside the learned networks: an analytic DTI
//! phantom, the Cartesian k-space degradation model with its pre-processing
//! chain, semantic prior providers, least-squares tensor fitting with
//! helix-angle analysis, and image-quality statistics.

pub mod array_io;
pub mod dataset;
pub mod dtfit;
pub mod image;
pub mod kspace;
pub mod metrics;
pub mod phantom;
pub mod semantics;

pub use image::{ImageSlice, NormalizationRecord, ShapeInfo};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
