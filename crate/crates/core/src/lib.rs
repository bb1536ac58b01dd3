//! Core library for detflow: per-user workspaces, dataset ingestion and
//! record encoding, augmentation, training configuration, GPU scheduling,
//! job orchestration, evaluation and export.

pub mod augment;
pub mod clock;
pub mod ingest;
pub mod records;
pub mod workspace;
pub mod config;
pub mod export;
pub mod jobs;
pub mod metrics;
pub mod preprocess;
pub mod scheduler;
