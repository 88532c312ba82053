//! Operational harness around `noskim-core`: synthetic corpus generation,
//! training, attack sweeps, evaluation, and report rendering, glued together
//! by a TOML experiment config with `NOSKIM_` environment overrides.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod report;
pub mod svg;
