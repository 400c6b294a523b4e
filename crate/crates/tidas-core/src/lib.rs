//! Dynamic-focus delay-and-sum (DAS) beamforming and its time-invariant
//! approximation (tiDAS) on simulated linear-array RF data.
//!
//! The crate is organised bottom-up:
//!
//! * [`probe`]: array geometry, aperture rules and the receive delay law.
//! * [`sim`]: pulse model and per-element RF frame synthesis.
//! * [`das`]: fractional delays and the reference dynamic-focus beamformer.
//! * [`tidas`]: correction windows, closed-form θ and the single-pass line
//!   reconstructor.
//! * [`metrics`]: envelope, FWHM, error norms and side-lobe statistics.
//! * [`experiments`]: sweeps, line scenarios and the timing benchmark.
//! * [`io`]: frame and matrix persistence.

pub mod das;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod probe;
pub mod sim;
pub mod spectral;
pub mod tidas;

pub use error::{Error, Result};
