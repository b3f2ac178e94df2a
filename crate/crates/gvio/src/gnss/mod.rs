//! GNSS measurement handling: broadcast ephemerides, atmospheric delays,
//! pseudorange/Doppler prediction, epoch preprocessing, and a RINEX nav
//! reader.

pub mod atmosphere;
pub mod ephemeris;
pub mod measurement;
pub mod preprocess;
pub mod rinex;
pub mod types;

pub use ephemeris::{eval_ephemeris, solve_kepler, EphemerisStore};
pub use preprocess::{preprocess_epoch, ClockJumpMonitor, PreparedObservation, PreprocessConfig};
pub use types::{
    BroadcastEphemeris, Constellation, EpochObservations, GnssObservation, IonoParams,
    SatelliteState,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GnssError {
    /// Kepler's equation failed to converge within the iteration budget.
    #[error("Kepler's equation did not converge")]
    KeplerNonConvergence,
    /// Broadcast model only holds for near-circular orbits.
    #[error("eccentricity {0} outside the supported [0, 0.1) range")]
    EccentricityOutOfRange(f64),
    /// Query time too far from the ephemeris reference time.
    #[error("ephemeris for {constellation:?} sat {sat_id} expired ({age:.0} s from toe)")]
    EphemerisExpired { constellation: types::Constellation, sat_id: u32, age: f64 },
    /// No ephemeris stored for the requested satellite.
    #[error("no ephemeris for {constellation:?} sat {sat_id}")]
    UnknownSatelliteId { constellation: types::Constellation, sat_id: u32 },
    /// Elevation-dependent models are undefined at or below the horizon.
    #[error("satellite below the horizon (elevation {0:.3} rad)")]
    BelowHorizon(f64),
    /// Clock-jump detection needs enough common satellites for a median.
    #[error("only {found} common satellites between epochs, need {need}")]
    InsufficientCommonSatellites { found: usize, need: usize },
    /// Malformed RINEX content.
    #[error("RINEX format error at line {line}: {what}")]
    RinexFormat { line: usize, what: String },
}
