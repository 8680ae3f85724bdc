//! Time-dependent linear Boltzmann transport: solvers, albedo measurements,
//! geometric-optics probes, light-ray transform inversion and coefficient
//! reconstruction from boundary data.

// `!(x > 0.0)` is used on purpose to reject NaN together with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod albedo;
pub mod cli_io;
pub mod error;
pub mod geometry;
pub mod inversion;
pub mod phantoms;
pub mod probes;
pub mod raytransform;
pub mod transport;

pub use error::{Error, Result};
