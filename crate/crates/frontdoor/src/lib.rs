//! Command line and HTTP entry points over the shared pipeline.

pub mod cli;
pub mod service;
