//! Quantitative model of single-emitter extinction spectroscopy.
//!
//! A weak laser field and the coherently scattered field of a single
//! two-level emitter interfere on a detector. This crate evaluates the
//! resulting transmission and fluorescence spectra, projects them through a
//! linear analyzer, fits them by damped least squares and simulates
//! photon-counting acquisitions to validate the whole chain.
//!
//! Module map:
//!
//! - [`lineshape`]: steady-state coherence, Lorentzians, detected intensity,
//!   visibility and the derived scalar quantities.
//! - [`polarization`]: Jones-vector analyzer model giving the θ-dependent
//!   coupling and full polarizer scans.
//! - [`fitting`]: Levenberg-Marquardt engine and the spectral models it fits.
//! - [`synth`]: Poisson photon counting with scan averaging and laser drift.
//! - [`cli`]: command implementations behind the `extinction` binary.
//!
//! Interchangeable algorithms (Lorentzian form, fit model) are trait objects
//! kept in a name-keyed [`Registry`] and picked at runtime.

// NaN-rejecting guards are written as `!(x > y)` on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
mod error;
pub mod fitting;
pub mod lineshape;
pub mod polarization;
mod registry;
mod spectrum;
pub mod synth;

pub use error::{Error, Result};
pub use registry::Registry;
pub use spectrum::{symmetric_grid, uniform_grid, Spectrum};

pub use num_complex::Complex64;
