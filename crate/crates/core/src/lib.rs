//! Entropic multi-period martingale optimal transport on one-dimensional
//! grids.

pub mod chain;
pub mod error;
pub mod grid;
pub mod hedging;
pub mod incremental;
pub mod io;
pub mod marginals;
pub mod oracle;
pub mod pricing;
pub mod reference;
pub mod solver;
pub mod study;
pub mod tilt;

pub use error::{Error, Result};
