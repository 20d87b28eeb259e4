//! Quantum-illumination pump–probe thermal-lens toolkit.
//!
//! * [`lensmodel`]: time-dependent thermal + Soret phase and the on-axis
//!   probe transmission it produces.
//! * [`counting`]: pulsed photon-pair detection chain, and the g_{s−i},
//!   accidental, denoising and Klyshko estimators.
//! * [`fitting`]: weighted least-squares recovery of lens parameters from
//!   coincidence traces.
//!
//! [`special`] and [`quadrature`] hold the numerical kernels the model uses.

pub mod counting;
pub mod error;
pub mod fitting;
pub mod lensmodel;
pub mod quadrature;
pub mod special;

pub use counting::{CountingConfig, TimeTrace};
pub use error::{Error, Result};
pub use fitting::{fit, FitPoint, FitResult, FitSpec, Param};
pub use lensmodel::{BeamGeometry, LensModel, LensParams, RelaxTimes, Scenario};
