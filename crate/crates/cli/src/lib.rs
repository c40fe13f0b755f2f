//! File formats, configuration and commands of the `mcfqkd` tool.

pub mod commands;
pub mod config;
pub mod output;
pub mod parallel;
pub mod svg;
pub mod tagfile;
