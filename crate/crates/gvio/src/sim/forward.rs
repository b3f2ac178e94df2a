//! Noiseless forward models for GNSS measurements.
//!
//! The pseudorange is generated by solving the same fixed point the receiver
//! side solves when it recovers the transmit time from a measured
//! pseudorange (t_tx = t_rx - pr/c - sat_clock). Generating against that
//! convention instead of the physical light-time equation keeps simulated
//! measurements and measurement predictions consistent to machine precision,
//! which is what makes noiseless end-to-end runs close exactly.

use nalgebra::Vector3;

use crate::constants::SPEED_OF_LIGHT;
use crate::frames::{ecef_to_geodetic, elevation_azimuth};
use crate::gnss::atmosphere::{iono_frequency_scale, klobuchar_delay, saastamoinen_delay};
use crate::gnss::ephemeris::{eval_ephemeris, DEFAULT_VALIDITY};
use crate::gnss::measurement::{predict_doppler, predict_pseudorange};
use crate::gnss::types::{BroadcastEphemeris, IonoParams, SatelliteState};

/// A noiseless pseudorange with the geometry it was generated from.
#[derive(Debug, Clone)]
pub struct ForwardGnss {
    pub pseudorange: f64,
    pub sat: SatelliteState,
    pub t_tx: f64,
    pub elevation: f64,
    pub azimuth: f64,
    pub tropo: f64,
    pub iono: f64,
}

/// Generates the noiseless pseudorange for one satellite at reception time
/// `t`, or `None` when the satellite is below the horizon or the ephemeris
/// is unusable.
pub fn forward_pseudorange(
    eph: &BroadcastEphemeris,
    t: f64,
    rec_ecef: &Vector3<f64>,
    rec_clock_bias: f64,
    iono: &IonoParams,
) -> Option<ForwardGnss> {
    let rec_geo = ecef_to_geodetic(rec_ecef).ok()?;
    let mut pr = 0.075 * SPEED_OF_LIGHT;
    let mut sat = eval_ephemeris(eph, t - pr / SPEED_OF_LIGHT).ok()?;
    let mut out = None;
    for _ in 0..12 {
        let t_tx = t - pr / SPEED_OF_LIGHT - sat.clock_bias;
        sat = eval_ephemeris(eph, t_tx).ok()?;
        let (elevation, azimuth) = elevation_azimuth(&sat.pos, rec_ecef).ok()?;
        if elevation <= 0.0 {
            return None;
        }
        let tropo = saastamoinen_delay(&rec_geo, elevation).ok()?;
        let iono_m = klobuchar_delay(&rec_geo, elevation, azimuth, t, iono).ok()?
            * iono_frequency_scale(eph.constellation.carrier_wavelength());
        let next = predict_pseudorange(&sat, rec_ecef, rec_clock_bias, tropo, iono_m);
        let converged = (next - pr).abs() < 1e-10;
        pr = next;
        out = Some(ForwardGnss { pseudorange: pr, sat, t_tx, elevation, azimuth, tropo, iono: iono_m });
        if converged {
            break;
        }
    }
    out
}

/// Noiseless Doppler matching a generated pseudorange's geometry.
pub fn forward_doppler(
    fwd: &ForwardGnss,
    rec_ecef: &Vector3<f64>,
    rec_vel_ecef: &Vector3<f64>,
    rec_clock_drift: f64,
    wavelength: f64,
) -> f64 {
    predict_doppler(&fwd.sat, rec_ecef, rec_vel_ecef, rec_clock_drift, wavelength)
}

/// Validity horizon used when regenerating satellite states from measured
/// pseudoranges; re-exported so callers stay consistent with generation.
pub const FORWARD_VALIDITY: f64 = DEFAULT_VALIDITY;
