//! Broadcast ephemeris evaluation: Keplerian orbit propagation with the
//! standard harmonic corrections, plus the satellite clock polynomial.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::constants::{EARTH_GM, EARTH_ROTATION_RATE};
use crate::gnss::types::{BroadcastEphemeris, Constellation, SatelliteState};
use crate::gnss::GnssError;

/// Half a GNSS week (s), for time-of-week wraparound.
const HALF_WEEK: f64 = 302_400.0;

/// Default ephemeris validity horizon around toe (s).
pub const DEFAULT_VALIDITY: f64 = 7_200.0;

/// Wraps a time difference into [-302400, 302400] to cross week boundaries.
fn wrap_week(dt: f64) -> f64 {
    let mut dt = dt;
    if dt > HALF_WEEK {
        dt -= 2.0 * HALF_WEEK;
    } else if dt < -HALF_WEEK {
        dt += 2.0 * HALF_WEEK;
    }
    dt
}

/// Solves Kepler's equation M = E - e sin E for the eccentric anomaly.
pub fn solve_kepler(m: f64, e: f64) -> Result<f64, GnssError> {
    if !(0.0..0.1).contains(&e) {
        return Err(GnssError::EccentricityOutOfRange(e));
    }
    let mut ecc = m;
    for _ in 0..20 {
        let delta = (ecc - e * ecc.sin() - m) / (1.0 - e * ecc.cos());
        ecc -= delta;
        if delta.abs() < 1e-12 {
            return Ok(ecc);
        }
    }
    Err(GnssError::KeplerNonConvergence)
}

/// Evaluates satellite position, velocity, and clock at time `t` (GNSS
/// seconds). Position/velocity are in the ECEF frame of epoch `t`.
pub fn eval_ephemeris(eph: &BroadcastEphemeris, t: f64) -> Result<SatelliteState, GnssError> {
    eval_ephemeris_with_validity(eph, t, DEFAULT_VALIDITY)
}

/// Same as [`eval_ephemeris`] with an explicit validity horizon around toe.
pub fn eval_ephemeris_with_validity(
    eph: &BroadcastEphemeris,
    t: f64,
    validity: f64,
) -> Result<SatelliteState, GnssError> {
    let tk = wrap_week(t - eph.toe);
    if tk.abs() > validity {
        return Err(GnssError::EphemerisExpired {
            constellation: eph.constellation,
            sat_id: eph.sat_id,
            age: tk.abs(),
        });
    }

    let a = eph.sqrt_a * eph.sqrt_a;
    let n0 = (EARTH_GM / (a * a * a)).sqrt();
    let n = n0 + eph.delta_n;
    let m = eph.m0 + n * tk;
    let ecc_anom = solve_kepler(m, eph.e)?;
    let (sin_e, cos_e) = ecc_anom.sin_cos();

    // True anomaly and argument of latitude.
    let nu = ((1.0 - eph.e * eph.e).sqrt() * sin_e).atan2(cos_e - eph.e);
    let phi = nu + eph.omega;
    let (sin_2phi, cos_2phi) = (2.0 * phi).sin_cos();

    // Second-harmonic corrections.
    let du = eph.cus * sin_2phi + eph.cuc * cos_2phi;
    let dr = eph.crs * sin_2phi + eph.crc * cos_2phi;
    let di = eph.cis * sin_2phi + eph.cic * cos_2phi;

    let u = phi + du;
    let r = a * (1.0 - eph.e * cos_e) + dr;
    let i = eph.i0 + di + eph.i_dot * tk;
    let omega_k = eph.omega0 + (eph.omega_dot - EARTH_ROTATION_RATE) * tk - EARTH_ROTATION_RATE * eph.toe;

    let (sin_u, cos_u) = u.sin_cos();
    let (sin_i, cos_i) = i.sin_cos();
    let (sin_om, cos_om) = omega_k.sin_cos();

    let x_orb = r * cos_u;
    let y_orb = r * sin_u;
    let pos = Vector3::new(
        x_orb * cos_om - y_orb * cos_i * sin_om,
        x_orb * sin_om + y_orb * cos_i * cos_om,
        y_orb * sin_i,
    );

    // Time derivatives of the orbital elements, standard broadcast algebra.
    let e_dot = n / (1.0 - eph.e * cos_e);
    let phi_dot = ((1.0 - eph.e * eph.e).sqrt() / (1.0 - eph.e * cos_e)) * e_dot;
    let u_dot = phi_dot * (1.0 + 2.0 * (eph.cus * cos_2phi - eph.cuc * sin_2phi));
    let r_dot = a * eph.e * sin_e * e_dot + 2.0 * phi_dot * (eph.crs * cos_2phi - eph.crc * sin_2phi);
    let i_dot = eph.i_dot + 2.0 * phi_dot * (eph.cis * cos_2phi - eph.cic * sin_2phi);
    let om_dot = eph.omega_dot - EARTH_ROTATION_RATE;

    let x_orb_dot = r_dot * cos_u - r * sin_u * u_dot;
    let y_orb_dot = r_dot * sin_u + r * cos_u * u_dot;

    let vel = Vector3::new(
        x_orb_dot * cos_om - y_orb_dot * cos_i * sin_om + y_orb * sin_i * sin_om * i_dot
            - pos.y * om_dot,
        x_orb_dot * sin_om + y_orb_dot * cos_i * cos_om - y_orb * sin_i * cos_om * i_dot
            + pos.x * om_dot,
        y_orb_dot * sin_i + y_orb * cos_i * i_dot,
    );

    let dtc = wrap_week(t - eph.toc);
    let clock_bias = eph.af0 + eph.af1 * dtc + eph.af2 * dtc * dtc;
    let clock_drift = eph.af1 + 2.0 * eph.af2 * dtc;

    Ok(SatelliteState { pos, vel, clock_bias, clock_drift })
}

/// Ephemeris lookup by satellite, choosing the record whose toe is closest
/// to the query time.
#[derive(Debug, Clone, Default)]
pub struct EphemerisStore {
    records: BTreeMap<(Constellation, u32), Vec<BroadcastEphemeris>>,
}

impl EphemerisStore {
    pub fn new(ephemerides: impl IntoIterator<Item = BroadcastEphemeris>) -> Self {
        let mut store = Self::default();
        for eph in ephemerides {
            store.insert(eph);
        }
        store
    }

    pub fn insert(&mut self, eph: BroadcastEphemeris) {
        self.records.entry((eph.constellation, eph.sat_id)).or_default().push(eph);
    }

    pub fn len(&self) -> usize {
        self.records.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Most suitable record for a satellite at time `t`.
    pub fn lookup(
        &self,
        constellation: Constellation,
        sat_id: u32,
        t: f64,
    ) -> Result<&BroadcastEphemeris, GnssError> {
        let list = self
            .records
            .get(&(constellation, sat_id))
            .ok_or(GnssError::UnknownSatelliteId { constellation, sat_id })?;
        list.iter()
            .min_by(|a, b| {
                let da = wrap_week(t - a.toe).abs();
                let db = wrap_week(t - b.toe).abs();
                da.partial_cmp(&db).expect("toe differences are finite")
            })
            .ok_or(GnssError::UnknownSatelliteId { constellation, sat_id })
    }

    /// Iterates over all stored records in (constellation, sat_id) order.
    pub fn iter(&self) -> impl Iterator<Item = &BroadcastEphemeris> {
        self.records.values().flatten()
    }
}
