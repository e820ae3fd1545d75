//! Rough-volatility pricing and calibration engine.
//!
//! The crate implements the Markovian lift of the rough-Heston model (an
//! n-factor Markov approximation of the fractional-kernel Volterra variance
//! process), its local-volatility extension (HMLV), Dupire local-volatility
//! surfaces in the singular (theta, zeta) coordinate system adapted to rough
//! dynamics, and the empirical machinery for the small-time "H + 3/2"
//! skew-ratio law.
//!
//! Module map:
//! - [`kernel`]: fractional kernel and its sum-of-exponentials lift.
//! - [`sim`]: Monte Carlo simulation of the lifted and HMLV dynamics.
//! - [`black`]: Black pricing, implied-vol inversion, MC pricing.
//! - [`fourier`]: characteristic functions (classical Heston and the
//!   fractional Riccati-Volterra solver) with damped Fourier pricing.
//! - [`surface`]: quote lattices, Dupire local vol, the (theta, zeta)
//!   coordinates, the monotone-spline psi interpolation, PDE repricing and
//!   the nodal local-vol calibration loop.
//! - [`leverage`]: particle estimation of E[v | S] and leverage assembly.
//! - [`skew`]: ATM skew estimators and the fixed-slope regression study.
//! - [`cli`]: command-line front end and file formats.

pub mod black;
pub mod cli;
pub mod error;
pub mod fourier;
pub mod kernel;
pub mod leverage;
pub(crate) mod math;
pub mod params;
pub mod sim;
pub mod skew;
pub mod surface;

pub use error::{Error, Result};
pub use kernel::{
    build_lift, fractional_kernel, kernel_approx_error, scales_for_gamma_range, LiftNode, LiftSpec,
};
pub use params::ModelParams;
