//! Experiment runner for `gdsd-core`: configuration files, a thread-pool
//! executor, output formats, the numerical verification suites and the
//! `train` / `verify` / `tim` commands.

pub mod config;
pub mod exec;
pub mod output;
pub mod run;
pub mod verify;
