//! Experiment runner for consistency flow matching: JSON configs, training
//! loops with periodic evaluation, binary checkpoints and CSV reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use error::CliError;
