//! Library side of the `echoir` command-line tool.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod degrade;
pub mod eval;
pub mod image_io;
pub mod manifest;
pub mod train;
