//! IO, file formats, and the command-line pipeline around `dfmim-core`.
//!
//! Everything that touches the filesystem or the OS lives here: TOML
//! configuration, dataset manifests and speaker folds, checkpoint and
//! feature files, WAV decoding, synthetic corpus generation, report
//! rendering, and the subcommand implementations.

pub mod audio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod features;
pub mod manifest;
pub mod report;
pub mod synth;
