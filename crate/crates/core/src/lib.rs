//! Locate, segment, inpaint, describe: a single-prompt image editing
//! pipeline with pluggable model backends and persisted per-stage artifacts.

pub mod geometry;
pub mod maskops;
pub mod backends;
pub mod artifacts;
pub mod pipeline;
pub mod evalsuite;
