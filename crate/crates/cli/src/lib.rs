//! Command-line front end: run configuration, cost accounting, benchmarking
//! and the `spx` subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod bench;
pub mod config;
pub mod cost;

pub use app::{exit_code, run, Cli};
pub use config::RunConfig;
pub use cost::{flops_count, CostReport, CostRow, Ratio, COMPONENTS};
