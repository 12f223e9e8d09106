//! File formats, reports, threading and the command-line driver built on
//! `mvpnav-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod exec;
pub mod report;
pub mod svg;
