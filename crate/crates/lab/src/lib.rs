//! Command-line lab for extremum seeking experiments: configs, trajectory
//! CSV, JSON reports and SVG plots on top of `esc-core`.

pub mod cli;
pub mod error;
pub mod jobs;
pub mod output;
pub mod plot;
pub mod report;
pub mod settings;

pub use cli::run;
