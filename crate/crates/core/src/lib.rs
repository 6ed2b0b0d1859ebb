//! Self-supervised 360° room layout estimation by differentiable layout view
//! rendering.
//!
//! The crate fits per-column floor and ceiling boundary angles of panorama
//! pairs with known relative poses by gradient descent on photometric and
//! geometric consistency losses. See the README for the CLI.

pub mod active;
pub mod cli;
pub mod dlvr;
pub mod error;
pub mod fidelity;
pub mod fit;
pub mod geometry;
pub mod grad;
pub mod io;
pub mod layout;
pub mod losses;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
