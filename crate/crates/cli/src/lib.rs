//! Library side of the `pnnl` command-line tool: run configuration,
//! report files and the four subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use commands::{cmd_bench, cmd_convert, cmd_evaluate, cmd_run, BenchRow, EvalSource, RunOverrides, SplitName};
pub use config::RunConfig;
pub use error::CliError;
pub use report::{mask_wall_time, ReportFile, Summary, WALL_TIME_FIELDS};
