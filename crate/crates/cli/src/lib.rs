//! Verification suites and command-line front end for `epsoracle-core`.
//!
//! Subcommands read a JSON [`config::ExperimentConfig`], run one suite and
//! write JSONL rows, a CSV aggregate and a summary into an output directory.
//! Exit codes: 0 when every gate passes, 1 on config or IO errors, 2 on a
//! gate failure.

pub mod cli;
pub mod config;
pub mod output;
pub mod report;
pub mod suites;
