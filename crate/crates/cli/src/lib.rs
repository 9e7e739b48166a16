//! Configuration and pipelines behind the `mimic` binary.

pub mod config;
pub mod run;
