//! Workflow layer over the numeric core: file formats, run management, and
//! the command-line interface.
//!
//! The `cavmae-core` crate holds every numeric piece (tensors, autodiff,
//! model, training, evaluation, synthetic data). This crate adds what needs
//! an operating system: the dataset and checkpoint containers, run
//! manifests, metric tables and image dumps, flat key=value configuration,
//! and the `cavmae` executable's ten subcommands.

pub mod artifacts;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod manifest;
pub mod run;
pub mod workflows;

pub use error::{CliError, Result};
