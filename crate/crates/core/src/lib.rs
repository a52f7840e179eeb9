#![no_std]
//! Numerics for continuous-time extremum seeking control.

extern crate alloc;

pub mod averaging;
pub mod cost;
pub mod dither;
pub mod error;
pub mod esc;
pub mod estimator;
pub mod integrator;
pub mod matrix;
pub mod stability;

pub use error::{Error, Result};
