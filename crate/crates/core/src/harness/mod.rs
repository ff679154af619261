//! Desk-scale experiment harness: synthetic data, the end-to-end pipeline,
//! evaluation and file formats.

pub mod config;
pub mod data;
pub mod io;
pub mod metrics;
pub mod pipeline;

pub use config::RunConfig;
pub use data::{make_blob_batch, BlobDataset, BlobDatasetSpec};
pub use metrics::quadrant_accuracy;
pub use pipeline::{run_pipeline, run_with, RunSummary};
