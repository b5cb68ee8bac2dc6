//! Library surface of the command-line front door, kept separate from the
//! binary so integration tests can drive commands in-process.

pub mod bench;
pub mod build;
pub mod commands;
pub mod config;
