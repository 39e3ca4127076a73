//! File formats, configuration and command implementations for the
//! `replaymap` command-line tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod output;
pub mod ply;
pub mod scan_io;
