//! HTTP service, event log and command-line tools for the dialogue racetrack.

pub mod api;
pub mod cli;
pub mod config;
pub mod eventlog;
pub mod mocks;
