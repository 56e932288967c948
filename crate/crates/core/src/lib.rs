//! Numerical toolkit for heat flow on collapsing semi-flat torus fibrations over conic bases.
//!
//! The crate discretizes the base chart and the total space with divergence-form stencils,
//! applies heat semigroups, builds the normalized lift/average pair, evaluates flat-cone
//! heat kernels by Bessel series and runs the two-parameter (collapse, cutoff) comparison.

pub mod assembly;
pub mod cli;
pub mod cone;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod heat;
pub mod ident;
pub mod linalg;
pub mod renorm;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
