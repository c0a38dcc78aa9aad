//! Correlation channel sounding and coastal-gateway localization.
//!
//! The crate is organized along the processing chain:
//!
//! - [`signal`]: PRBS probe waveforms and cross-correlation.
//! - [`channel`]: path loss models and tapped-delay-line multipath with AWGN.
//! - [`sounder`]: window averaging and path detection.
//! - [`locate`]: POA / TOA / TDOA position estimation on a damped Gauss-Newton solver.
//! - [`mobility`]: dive/surface turtle tracks.
//! - [`sim`]: localization experiments and paired channel comparisons.
//! - [`iq`]: headerless interleaved `cf32` sample files.

pub mod channel;
pub mod error;
pub mod iq;
pub mod locate;
pub mod mobility;
pub mod rng;
pub mod signal;
pub mod sim;
pub mod sounder;

pub use error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
