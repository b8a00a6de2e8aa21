//! Problem files, the end-to-end pipeline and its exports.
//!
//! The library side of the `ellabs` binary: parse a TOML problem, build an
//! abstraction, simulate the concrete controller and write JSON, DOT and
//! CSV artifacts together with a run manifest.

pub mod cli;
pub mod export;
pub mod pipeline;
pub mod problem;

pub use pipeline::{run, run_file, ExitStatus, RunError, RunOptions, Sweep};
pub use problem::{Problem, ProblemError, ProblemFile};
