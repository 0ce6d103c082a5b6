//! Command-line and HTTP front ends for `committee-core`.

pub mod cli;
pub mod exec;
pub mod server;
