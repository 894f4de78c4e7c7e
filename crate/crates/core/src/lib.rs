//! Simulation and analysis core for polarization-entangled photon pairs
//! distributed over a 19-core multicore fiber.
//!
//! The crate is organised bottom-up:
//!
//! - [`polarization`]: two-qubit polarization states, analyzer statistics, CHSH.
//! - [`source`]: SPDC pair generation with transverse-momentum anti-correlation.
//! - [`channel`]: core layout, far-field coupling, per-core loss, cross-talk
//!   and birefringence.
//! - [`detection`]: polarization analyzers, SNSPD models and the TTAG file format.
//! - [`coincidence`]: streaming cross-correlation and coincidence counting.
//! - [`metrics`]: visibilities, CHSH from counts, fringe fitting, Poisson errors.

pub mod channel;
pub mod coincidence;
pub mod detection;
pub mod geometry;
pub mod metrics;
pub mod polarization;
pub mod rng;
pub mod source;

pub use channel::{CoreId, CoreLayout, Ring};
pub use detection::TimeTag;
pub use geometry::Point;
pub use polarization::PolarizationState;

/// Picoseconds per second.
pub const PS_PER_S: f64 = 1e12;
