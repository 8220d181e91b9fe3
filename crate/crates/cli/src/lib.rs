//! Orchestration of the reconstruction pipeline: phantom simulation,
//! end-to-end training, coarse-to-fine reconstruction, tensor fitting,
//! evaluation and figure generation, with content-hash stage caching.

pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod store;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
pub use manifest::RunManifest;
pub use pipeline::{run_pipeline, Pipeline, Stage};
