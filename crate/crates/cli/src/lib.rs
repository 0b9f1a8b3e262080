//! Command-line pipeline: resolved TOML configs, per-stage manifests and
//! one function per subcommand.

pub mod config;
pub mod manifest;
pub mod stages;
