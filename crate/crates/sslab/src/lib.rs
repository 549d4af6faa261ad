//! File formats, experiment pipelines and the command line for the sslab
//! pretraining laboratory.

pub use sslab_core as core;

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod ppm;
pub mod runs;
pub mod svg;
pub mod sweep;
pub mod tables;
