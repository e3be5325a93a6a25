//! Physics and data layer for the tomoforge toolkit.
//!
//! Provides the parallel-beam scan geometry, the discrete Radon transform and
//! its exact adjoint, ramp filtering and filtered back-projection, the
//! Poisson-Gaussian-quantization sensor model with a brute-force Bayesian
//! posterior oracle, synthetic phantom generation, CT slice preprocessing,
//! SSIM, the TNSR tensor container and the INI run configuration.

pub mod config;
pub mod data;
pub mod filter;
pub mod geom;
mod math;
pub mod metrics;
pub mod posterior;
pub mod radon;
pub mod real;
pub mod rng;
pub mod sensor;
pub mod tnsr;

pub use geom::{GeometryError, ImageGrid, ScanGeometry, Sinogram};
pub use real::Real;
