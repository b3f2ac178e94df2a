//! Shared GNSS data types: constellations, raw observations, broadcast
//! ephemeris records, and evaluated satellite states.

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::constants::SPEED_OF_LIGHT;

/// Satellite system. All four use the same Keplerian broadcast model here;
/// they differ only in carrier frequency and receiver clock bias slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Constellation {
    Gps,
    Glonass,
    Galileo,
    Beidou,
}

impl Constellation {
    pub const ALL: [Constellation; 4] = [
        Constellation::Gps,
        Constellation::Glonass,
        Constellation::Galileo,
        Constellation::Beidou,
    ];

    /// Slot of this constellation in the 4-vector receiver clock state.
    pub fn index(self) -> usize {
        match self {
            Constellation::Gps => 0,
            Constellation::Glonass => 1,
            Constellation::Galileo => 2,
            Constellation::Beidou => 3,
        }
    }

    /// One-hot indicator selecting this constellation's clock bias.
    pub fn indicator(self) -> Vector4<f64> {
        let mut z = Vector4::zeros();
        z[self.index()] = 1.0;
        z
    }

    /// Primary carrier frequency (Hz): L1, G1, E1, B1I.
    pub fn carrier_frequency(self) -> f64 {
        match self {
            Constellation::Gps => 1_575.42e6,
            Constellation::Glonass => 1_602.0e6,
            Constellation::Galileo => 1_575.42e6,
            Constellation::Beidou => 1_561.098e6,
        }
    }

    /// Primary carrier wavelength (m).
    pub fn carrier_wavelength(self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency()
    }

    /// Single-letter system code as used in RINEX.
    pub fn code(self) -> char {
        match self {
            Constellation::Gps => 'G',
            Constellation::Glonass => 'R',
            Constellation::Galileo => 'E',
            Constellation::Beidou => 'C',
        }
    }
}

/// One pseudorange/Doppler pair from one satellite at one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GnssObservation {
    pub constellation: Constellation,
    pub sat_id: u32,
    /// Measured pseudorange (m).
    pub pseudorange: f64,
    /// Measured Doppler shift (Hz), positive when approaching. `None` when
    /// the channel tracked code only (or a scenario edit removed Doppler).
    pub doppler: Option<f64>,
    /// Carrier wavelength of the tracked signal (m).
    pub wavelength: f64,
    /// Base pseudorange noise term n_pr (m) before elevation scaling.
    pub noise_pr: f64,
    /// Base Doppler noise term n_dp (Hz) before elevation scaling.
    pub noise_dp: f64,
    /// Satellite-specific noise scale n_s (unitless).
    pub noise_sat: f64,
    /// Consecutive epochs this satellite has been tracked.
    pub lock_count: u32,
    /// Health flag from the broadcast stream.
    pub healthy: bool,
}

/// All observations sharing one receiver epoch `t` (GNSS seconds).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochObservations {
    pub t: f64,
    pub observations: Vec<GnssObservation>,
}

/// Keplerian broadcast ephemeris record (GPS LNAV layout). The same model is
/// applied to every constellation in this crate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BroadcastEphemeris {
    pub constellation: Constellation,
    pub sat_id: u32,
    /// Ephemeris reference time (GNSS seconds).
    pub toe: f64,
    /// Clock reference time (GNSS seconds).
    pub toc: f64,
    /// Square root of the semi-major axis (m^0.5).
    pub sqrt_a: f64,
    /// Eccentricity.
    pub e: f64,
    /// Inclination at toe (rad).
    pub i0: f64,
    /// Longitude of ascending node at week epoch (rad).
    pub omega0: f64,
    /// Argument of perigee (rad).
    pub omega: f64,
    /// Mean anomaly at toe (rad).
    pub m0: f64,
    /// Mean motion correction (rad/s).
    pub delta_n: f64,
    /// Rate of inclination (rad/s).
    pub i_dot: f64,
    /// Rate of right ascension (rad/s).
    pub omega_dot: f64,
    /// Harmonic correction terms (rad, rad, m, m, rad, rad).
    pub cuc: f64,
    pub cus: f64,
    pub crc: f64,
    pub crs: f64,
    pub cic: f64,
    pub cis: f64,
    /// Clock polynomial: bias (s), drift (s/s), drift rate (s/s^2).
    pub af0: f64,
    pub af1: f64,
    pub af2: f64,
    /// Health word; 0 means usable.
    pub health: u32,
}

/// Satellite position, velocity, and clock at a given time, in ECEF.
#[derive(Debug, Clone, Copy)]
pub struct SatelliteState {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    /// Clock bias (s).
    pub clock_bias: f64,
    /// Clock drift (s/s).
    pub clock_drift: f64,
}

/// Klobuchar broadcast ionosphere coefficients.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IonoParams {
    pub alpha: [f64; 4],
    pub beta: [f64; 4],
}

impl Default for IonoParams {
    /// Representative mid-latitude broadcast values.
    fn default() -> Self {
        Self {
            alpha: [1.1176e-8, 7.4506e-9, -5.9605e-8, -5.9605e-8],
            beta: [90112.0, 0.0, -196608.0, -65536.0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indicator_is_one_hot() {
        for c in Constellation::ALL {
            let z = c.indicator();
            assert_eq!(z.sum(), 1.0);
            assert_eq!(z[c.index()], 1.0);
        }
    }

    #[test]
    fn wavelengths_are_near_19_cm() {
        for c in Constellation::ALL {
            let w = c.carrier_wavelength();
            assert!(w > 0.18 && w < 0.20, "{c:?} wavelength {w}");
        }
    }
}
