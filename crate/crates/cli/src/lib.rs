//! Command implementations behind the `fasvit` binary.

pub mod commands;
pub mod config;
