//! HTTP service and command-line front end for the anchorage engine.

pub mod api;
pub mod cli;
pub mod config;
pub mod runtime;

pub use config::EngineConfig;
pub use runtime::{Runtime, ServiceError};
