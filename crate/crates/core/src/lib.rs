//! Correctors that make bounded incompressible flows recurrent, plus the
//! diagnostics, flow integration, recurrence scans and control planning
//! built around them.

pub mod control;
pub mod cli;
pub mod corrector;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod fields;
pub mod quadrature;
pub mod recurrence;
pub mod wgrid;

pub use error::{Error, Result};
