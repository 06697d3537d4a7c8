//! Files, reports and the command line around `safeseq-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod format;
pub mod report;
pub mod verify;

pub use safeseq_core as core;
