//! HTTP API, event streaming and command-line client for detflow.

pub mod api;
pub mod cli;
pub mod error;
pub mod settings;
