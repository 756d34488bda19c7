//! Multiscale finite elements for elliptic problems with periodic
//! oscillating coefficients.

pub mod analysis;
pub mod cell;
pub mod coeff;
pub mod config;
pub mod error;
pub mod fem;
pub mod mesh;
pub mod msfem;
pub mod plot;
pub mod quadrature;
pub mod solver;
pub mod sparse;

pub use error::{MsfemError, Result};
