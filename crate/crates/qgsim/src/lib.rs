//! Numerical core for a singular quasi-geostrophic flow with Ekman pumping:
//! a spectral horizontal basis, a degenerate-elliptic vertical solver, the
//! boundary fractional-dissipation dynamics, and the coupled time stepper.

pub mod basis;
pub mod boundary;
pub mod driver;
pub mod elliptic;
pub mod error;
pub mod extension;
pub mod profile;
pub mod transport;
pub mod verify;
pub mod zgrid;

pub use error::{QgError, Result};
