//! Simulation and planning toolkit for optical tweezers driven by a digital
//! micromirror device.
//!
//! The pipeline runs from binary mirror patterns ([`patterns`]), through
//! coherent imaging and axial propagation ([`optics`]) and dipole potentials
//! ([`potential`]), to classical atom dynamics ([`dynamics`]), release and
//! recapture transport planning ([`transport`]) and synthetic fluorescence
//! detection ([`imaging`]). File formats live in [`io`].
//!
//! All quantities are SI internally. Shape geometry is specified in
//! image-plane micrometres, matching how trap layouts are usually drawn.

// Negated float comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constants;
pub mod dynamics;
pub mod imaging;
pub mod io;
pub mod optics;
pub mod patterns;
pub mod potential;
pub mod transport;

mod error;

pub use error::{Error, Result};

/// Three-component vector used for positions, velocities and forces.
pub type Vec3 = nalgebra::Vector3<f64>;
