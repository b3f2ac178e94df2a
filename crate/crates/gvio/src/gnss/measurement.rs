//! Pseudorange and Doppler measurement prediction.
//!
//! The pseudorange model is
//!
//! ```text
//! P = |p_sat - p_rec| + c (dt_rec - dt_sat) + T + I + S
//! ```
//!
//! with T/I the tropospheric and ionospheric delays and S the Earth-rotation
//! (Sagnac) correction. Multipath is not modeled. The Doppler model is
//!
//! ```text
//! df = -(1/lambda) [ k . (v_sat - v_rec) + c (ddt_rec - ddt_sat) ]
//! ```
//!
//! with `k` the unit receiver-to-satellite vector, so an approaching
//! satellite yields a positive shift.

use nalgebra::Vector3;

use crate::constants::SPEED_OF_LIGHT;
use crate::frames::sagnac_correction;
use crate::gnss::ephemeris::eval_ephemeris_with_validity;
use crate::gnss::types::{BroadcastEphemeris, SatelliteState};
use crate::gnss::GnssError;

/// Predicted pseudorange (m). `rec_clock_bias` is the receiver clock bias of
/// the observation's constellation (s); `tropo`/`iono` in meters.
pub fn predict_pseudorange(
    sat: &SatelliteState,
    rec_ecef: &Vector3<f64>,
    rec_clock_bias: f64,
    tropo: f64,
    iono: f64,
) -> f64 {
    let range = (sat.pos - rec_ecef).norm();
    range
        + SPEED_OF_LIGHT * (rec_clock_bias - sat.clock_bias)
        + tropo
        + iono
        + sagnac_correction(&sat.pos, rec_ecef)
}

/// Predicted Doppler shift (Hz). `rec_vel_ecef` is the receiver velocity in
/// ECEF; `rec_clock_drift` in s/s.
pub fn predict_doppler(
    sat: &SatelliteState,
    rec_ecef: &Vector3<f64>,
    rec_vel_ecef: &Vector3<f64>,
    rec_clock_drift: f64,
    wavelength: f64,
) -> f64 {
    let k = (sat.pos - rec_ecef).normalize();
    -(k.dot(&(sat.vel - rec_vel_ecef)) + SPEED_OF_LIGHT * (rec_clock_drift - sat.clock_drift))
        / wavelength
}

/// Elevation-dependent measurement standard deviation: n_s * n / sin^2(el).
pub fn elevation_sigma(noise_sat: f64, noise_base: f64, elevation: f64) -> Result<f64, GnssError> {
    if elevation <= 0.0 {
        return Err(GnssError::BelowHorizon(elevation));
    }
    let s = elevation.sin();
    Ok(noise_sat * noise_base / (s * s))
}

/// Signal transmit time and satellite state for a measured pseudorange.
///
/// Starts from `t_rx - pr/c` and applies two fixed-point refinements of the
/// satellite clock correction, which is more than enough for millimeter-level
/// consistency.
pub fn transmit_time(
    eph: &BroadcastEphemeris,
    t_rx: f64,
    pseudorange: f64,
    validity: f64,
) -> Result<(f64, SatelliteState), GnssError> {
    let mut t_tx = t_rx - pseudorange / SPEED_OF_LIGHT;
    let mut state = eval_ephemeris_with_validity(eph, t_tx, validity)?;
    for _ in 0..2 {
        t_tx = t_rx - pseudorange / SPEED_OF_LIGHT - state.clock_bias;
        state = eval_ephemeris_with_validity(eph, t_tx, validity)?;
    }
    Ok((t_tx, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pseudorange_includes_all_terms() {
        // 45-degree-ish geometry with hand-checkable pieces: range 5e6 m,
        // receiver bias 1 ms (+299792.458 m), satellite bias 10 us
        // (-2997.92458 m), tropo 2.4 m, iono 1.5 m, plus Sagnac.
        let sat = SatelliteState {
            pos: Vector3::new(9.378137e6, 0.0, 0.0),
            vel: Vector3::zeros(),
            clock_bias: 1e-5,
            clock_drift: 0.0,
        };
        let rec = Vector3::new(6.378137e6, 1e6, 0.0);
        let range = (sat.pos - rec).norm();
        let sagnac = sagnac_correction(&sat.pos, &rec);
        let p = predict_pseudorange(&sat, &rec, 1e-3, 2.4, 1.5);
        assert_relative_eq!(
            p,
            range + 299_792.458 - 2_997.924_58 + 2.4 + 1.5 + sagnac,
            epsilon = 1e-9
        );
        // Sagnac here: (omega/c) * x_sat * y_rec is positive and meters-scale.
        assert!(sagnac > 1.0 && sagnac < 10.0);
    }

    #[test]
    fn approaching_receiver_sees_positive_doppler() {
        // Receiver moving straight at a stationary satellite at 1 m/s with
        // zero clock drift: shift = +1/lambda, about +5.255 Hz at L1.
        let sat = SatelliteState {
            pos: Vector3::new(2.0e7, 0.0, 0.0),
            vel: Vector3::zeros(),
            clock_bias: 0.0,
            clock_drift: 0.0,
        };
        let rec = Vector3::new(6.378e6, 0.0, 0.0);
        let v = Vector3::new(1.0, 0.0, 0.0);
        let lambda = 0.19029;
        let df = predict_doppler(&sat, &rec, &v, 0.0, lambda);
        assert_relative_eq!(df, 1.0 / lambda, epsilon = 1e-9);
        assert_relative_eq!(df, 5.255, epsilon = 1e-2);
    }

    #[test]
    fn receiver_clock_drift_shifts_doppler() {
        let sat = SatelliteState {
            pos: Vector3::new(2.0e7, 0.0, 0.0),
            vel: Vector3::zeros(),
            clock_bias: 0.0,
            clock_drift: 0.0,
        };
        let rec = Vector3::new(6.378e6, 0.0, 0.0);
        let lambda = 0.19029;
        let df = predict_doppler(&sat, &rec, &Vector3::zeros(), 1e-9, lambda);
        assert_relative_eq!(df, -SPEED_OF_LIGHT * 1e-9 / lambda, epsilon = 1e-9);
    }

    #[test]
    fn sigma_grows_toward_horizon() {
        let zenith = elevation_sigma(1.0, 1.0, std::f64::consts::FRAC_PI_2).unwrap();
        assert_relative_eq!(zenith, 1.0, epsilon = 1e-12);
        let low = elevation_sigma(1.0, 1.0, std::f64::consts::FRAC_PI_6).unwrap();
        assert_relative_eq!(low, 4.0, epsilon = 1e-12);
        assert!(elevation_sigma(1.0, 1.0, 0.0).is_err());
    }
}
