//! File formats, configuration and the command line for the video editing
//! core in [`slicedit_core`].

pub mod cli;
pub mod config;
pub mod formats;
pub mod record;
pub mod selfcheck;

pub use slicedit_core as core;
