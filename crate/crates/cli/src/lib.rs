//! Library half of the `apa` binary: subcommand implementations and the
//! HTTP annotation service, exposed so they can be tested in-process.

pub mod commands;
pub mod server;
