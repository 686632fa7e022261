//! Numerical toolkit for optimal control of stochastic evolution equations
//! with memory: delayed forward dynamics, anticipated backward equations,
//! recursive cost functionals, and a maximum-principle optimizer, exercised
//! on linear-quadratic benchmarks and a stochastic heat equation demo.

pub mod error;
pub mod grid;
pub mod measure;
pub mod hilbert;
pub mod estimator;
pub mod forward;
pub mod backward;
pub mod smp;
pub mod lq;
pub mod spde;
pub mod config;
pub mod report;
pub mod cli;

pub use error::{Error, Result};
