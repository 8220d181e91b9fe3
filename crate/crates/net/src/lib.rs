//! Learned components of the coarse-to-fine reconstruction: a small
//! reverse-mode autodiff engine over 2D tensors, the state-space U-shaped
//! backbone, semantic feature integration, the hybrid loss and the
//! end-to-end training loop.
//!
//! Feature maps are channel-last `(h*w, C)` tensors in row-major pixel
//! order. Everything runs in double precision on a single thread.

pub mod backbone;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod model;
pub mod params;
pub mod perceptual;
pub mod scan;
pub mod tensor;
pub mod train;
pub mod vss;

pub use backbone::{Backbone, BackboneConfig};
pub use fusion::{Sfi, SfiConfig};
pub use graph::{Graph, Var};
pub use loss::LossWeights;
pub use model::{ModelConfig, Rsfr};
pub use tensor::Tensor;
pub use train::{train_end_to_end, TrainConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
