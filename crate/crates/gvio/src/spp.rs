//! Single point positioning: per-epoch Gauss-Newton on pseudoranges with
//! per-constellation receiver clock biases, a linear Doppler velocity solve,
//! and DOP metrics.
//!
//! With N constellations contributing, the position solve has 3 + N unknowns
//! and therefore needs at least N + 3 usable satellites; one extra satellite
//! per additional constellation buys its clock bias.

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::constants::SPEED_OF_LIGHT;
use crate::frames::{ecef_to_geodetic, enu_rotation, sagnac_gradient_wrt_receiver};
use crate::gnss::measurement::{predict_pseudorange, transmit_time};
use crate::gnss::preprocess::{constellation_count, preprocess_epoch, PreparedObservation};
use crate::gnss::types::{Constellation, EpochObservations, IonoParams};
use crate::gnss::{EphemerisStore, PreprocessConfig};

#[derive(Debug, Error)]
pub enum SppError {
    #[error("{found} usable satellites across {constellations} constellations, need {need}")]
    InsufficientSatellites { found: usize, need: usize, constellations: usize },
    #[error("Gauss-Newton did not converge in {0} iterations")]
    NonConvergence(usize),
    #[error("satellite geometry is singular or near-singular")]
    SingularGeometry,
}

/// Dilution-of-precision metrics in the ENU frame at the solution.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DopMetrics {
    pub gdop: f64,
    pub pdop: f64,
    pub hdop: f64,
    pub vdop: f64,
}

/// One epoch's navigation solution.
#[derive(Debug, Clone)]
pub struct SppSolution {
    pub t: f64,
    pub pos_ecef: Vector3<f64>,
    /// Receiver clock bias per constellation slot (s); meaningful only where
    /// `clock_present` is set.
    pub clock_bias: [f64; 4],
    pub clock_present: [bool; 4],
    /// Receiver velocity from Doppler, when enough Doppler was usable.
    pub vel_ecef: Option<Vector3<f64>>,
    /// Common receiver clock drift (s/s) from the velocity solve.
    pub clock_drift: Option<f64>,
    /// RMS of post-fit pseudorange residuals (m).
    pub residual_rms: f64,
    pub used_sats: usize,
    pub rejected_sats: usize,
    pub iterations: usize,
    pub dop: DopMetrics,
}

const MAX_ITERATIONS: usize = 10;
const STEP_TOLERANCE: f64 = 1e-4;
const OUTLIER_THRESHOLD: f64 = 10.0;

/// Distinct constellations present, in clock-slot order.
fn present_constellations(obs: &[PreparedObservation]) -> Vec<Constellation> {
    let mut present = [false; 4];
    for o in obs {
        present[o.constellation.index()] = true;
    }
    Constellation::ALL.into_iter().filter(|c| present[c.index()]).collect()
}

fn check_count(obs: &[PreparedObservation]) -> Result<(), SppError> {
    let n_const = constellation_count(obs);
    let need = n_const + 3;
    if n_const == 0 || obs.len() < need {
        return Err(SppError::InsufficientSatellites {
            found: obs.len(),
            need: need.max(4),
            constellations: n_const,
        });
    }
    Ok(())
}

/// Weighted Gauss-Newton position/clock solve over prepared observations.
///
/// `initial` of `None` is the cold start: Earth-center origin, unit weights
/// on the first pass (elevation weights are meaningless until the position
/// is roughly known).
pub fn solve_position(
    obs: &[PreparedObservation],
    initial: Option<(Vector3<f64>, [f64; 4])>,
    weighted: bool,
) -> Result<(Vector3<f64>, [f64; 4], DVector<f64>, usize), SppError> {
    check_count(obs)?;
    let constellations = present_constellations(obs);
    let n_unknowns = 3 + constellations.len();
    let (mut pos, mut clock) = initial.unwrap_or((Vector3::zeros(), [0.0; 4]));

    let mut residuals = DVector::zeros(obs.len());
    for iter in 0..MAX_ITERATIONS {
        let mut jac = DMatrix::zeros(obs.len(), n_unknowns);
        let plausible = pos.norm() > 1e6;
        for (i, o) in obs.iter().enumerate() {
            let sat = o.satellite_state();
            let bias = clock[o.constellation.index()];
            residuals[i] = predict_pseudorange(&sat, &pos, bias, o.tropo, o.iono) - o.pseudorange;
            let k = (o.sat_pos - pos).normalize();
            let grad = -k + sagnac_gradient_wrt_receiver(&o.sat_pos);
            let w = if weighted && plausible { 1.0 / o.sigma_pr } else { 1.0 };
            for a in 0..3 {
                jac[(i, a)] = grad[a] * w;
            }
            let slot = constellations.iter().position(|c| *c == o.constellation).expect("present");
            jac[(i, 3 + slot)] = w; // clock column in meters
            residuals[i] *= w;
        }
        let h = jac.transpose() * &jac;
        let g = jac.transpose() * &residuals;
        let step = h.cholesky().ok_or(SppError::SingularGeometry)?.solve(&(-g));
        pos += Vector3::new(step[0], step[1], step[2]);
        for (slot, c) in constellations.iter().enumerate() {
            clock[c.index()] += step[3 + slot] / SPEED_OF_LIGHT;
        }
        if step.norm() < STEP_TOLERANCE {
            // Refresh residuals at the accepted solution.
            for (i, o) in obs.iter().enumerate() {
                let sat = o.satellite_state();
                let bias = clock[o.constellation.index()];
                residuals[i] =
                    predict_pseudorange(&sat, &pos, bias, o.tropo, o.iono) - o.pseudorange;
            }
            return Ok((pos, clock, residuals, iter + 1));
        }
    }
    Err(SppError::NonConvergence(MAX_ITERATIONS))
}

impl PreparedObservation {
    pub(crate) fn satellite_state(&self) -> crate::gnss::types::SatelliteState {
        crate::gnss::types::SatelliteState {
            pos: self.sat_pos,
            vel: self.sat_vel,
            clock_bias: self.sat_clock_bias,
            clock_drift: self.sat_clock_drift,
        }
    }
}

/// Linear least-squares velocity and common clock drift from Doppler.
/// Observations without a Doppler measurement are ignored.
pub fn solve_velocity(
    obs: &[PreparedObservation],
    pos: &Vector3<f64>,
) -> Result<(Vector3<f64>, f64), SppError> {
    let with_doppler: Vec<(&PreparedObservation, f64)> =
        obs.iter().filter_map(|o| o.doppler.map(|d| (o, d))).collect();
    if with_doppler.len() < 4 {
        return Err(SppError::InsufficientSatellites {
            found: with_doppler.len(),
            need: 4,
            constellations: constellation_count(obs),
        });
    }
    let mut jac = DMatrix::zeros(with_doppler.len(), 4);
    let mut rhs = DVector::zeros(with_doppler.len());
    for (i, (o, doppler)) in with_doppler.iter().enumerate() {
        let k = (o.sat_pos - pos).normalize();
        let w = 1.0 / o.sigma_dp;
        // Doppler is linear in velocity and drift: measured equals
        // -(1/lambda)[k.(v_s - v_r) + c(ddt - ddt_sat)], so move the known
        // satellite terms to the right-hand side.
        for a in 0..3 {
            jac[(i, a)] = k[a] / o.wavelength * w;
        }
        jac[(i, 3)] = -1.0 / o.wavelength * w;
        rhs[i] = (doppler
            + (k.dot(&o.sat_vel) - SPEED_OF_LIGHT * o.sat_clock_drift) / o.wavelength)
            * w;
    }
    let h = jac.transpose() * &jac;
    let g = jac.transpose() * &rhs;
    let sol = h.cholesky().ok_or(SppError::SingularGeometry)?.solve(&g);
    Ok((Vector3::new(sol[0], sol[1], sol[2]), sol[3] / SPEED_OF_LIGHT))
}

/// DOP metrics from unit line-of-sight vectors in ENU at `pos`, using the
/// classic single-clock design matrix.
pub fn dop_metrics(obs: &[PreparedObservation], pos: &Vector3<f64>) -> Result<DopMetrics, SppError> {
    if obs.len() < 4 {
        return Err(SppError::InsufficientSatellites {
            found: obs.len(),
            need: 4,
            constellations: constellation_count(obs),
        });
    }
    let geo = ecef_to_geodetic(pos).map_err(|_| SppError::SingularGeometry)?;
    let r_en = enu_rotation(geo.lat, geo.lon);
    let mut g = DMatrix::zeros(obs.len(), 4);
    for (i, o) in obs.iter().enumerate() {
        let k_enu = r_en.transpose() * (o.sat_pos - pos).normalize();
        g[(i, 0)] = -k_enu.x;
        g[(i, 1)] = -k_enu.y;
        g[(i, 2)] = -k_enu.z;
        g[(i, 3)] = 1.0;
    }
    let h = (g.transpose() * &g)
        .try_inverse()
        .ok_or(SppError::SingularGeometry)?;
    let (he, hn, hu, ht) = (h[(0, 0)], h[(1, 1)], h[(2, 2)], h[(3, 3)]);
    if !(he.is_finite() && hn.is_finite() && hu.is_finite() && ht.is_finite())
        || he < 0.0
        || hn < 0.0
        || hu < 0.0
    {
        return Err(SppError::SingularGeometry);
    }
    Ok(DopMetrics {
        gdop: (he + hn + hu + ht).sqrt(),
        pdop: (he + hn + hu).sqrt(),
        hdop: (he + hn).sqrt(),
        vdop: hu.sqrt(),
    })
}

/// Full per-epoch solution from raw observations: bootstrap solve without
/// corrections, preprocess at the coarse position, weighted re-solve, one
/// outlier rejection round, then Doppler velocity and DOP.
pub fn solve_epoch(
    epoch: &EpochObservations,
    store: &EphemerisStore,
    iono: &IonoParams,
    config: &PreprocessConfig,
) -> Result<SppSolution, SppError> {
    // Bootstrap set: no elevation-dependent filtering or corrections, since
    // the receiver position is still unknown.
    let mut coarse: Vec<PreparedObservation> = Vec::new();
    for o in &epoch.observations {
        if !o.healthy || o.lock_count < config.min_lock_count {
            continue;
        }
        let Ok(eph) = store.lookup(o.constellation, o.sat_id, epoch.t) else { continue };
        if eph.health != 0 {
            continue;
        }
        let Ok((_t_tx, sat)) = transmit_time(eph, epoch.t, o.pseudorange, config.ephemeris_validity)
        else {
            continue;
        };
        coarse.push(PreparedObservation {
            constellation: o.constellation,
            sat_id: o.sat_id,
            pseudorange: o.pseudorange,
            doppler: o.doppler,
            wavelength: o.wavelength,
            sat_pos: sat.pos,
            sat_vel: sat.vel,
            sat_clock_bias: sat.clock_bias,
            sat_clock_drift: sat.clock_drift,
            tropo: 0.0,
            iono: 0.0,
            sagnac: 0.0,
            unit_to_sat: sat.pos.normalize(),
            elevation: std::f64::consts::FRAC_PI_2,
            sigma_pr: 1.0,
            sigma_dp: 1.0,
        });
    }
    let (coarse_pos, coarse_clock, _, _) = solve_position(&coarse, None, false)?;

    // Refined solves with masks, corrections, and elevation weights. The
    // atmospheric corrections depend on the receiver position, so re-derive
    // them at each improved solution until the position settles.
    let mut rejected_ids: std::collections::BTreeSet<(Constellation, u32)> =
        std::collections::BTreeSet::new();
    let (mut pos, mut clock) = (coarse_pos, coarse_clock);
    let mut accepted = None;
    for round in 0..5 {
        let sub = EpochObservations {
            t: epoch.t,
            observations: epoch
                .observations
                .iter()
                .filter(|o| !rejected_ids.contains(&(o.constellation, o.sat_id)))
                .cloned()
                .collect(),
        };
        let prepared = preprocess_epoch(&sub, store, &pos, iono, config);
        check_count(&prepared)?;
        let (p, c, residuals, iterations) = solve_position(&prepared, Some((pos, clock)), true)?;
        let moved = (p - pos).norm();
        pos = p;
        clock = c;
        if round == 0 && residuals.iter().any(|r| r.abs() > OUTLIER_THRESHOLD) {
            // One fault-exclusion pass. A large post-fit residual flags an
            // outlier somewhere, but least squares smears the fault across
            // satellites, so identify it by trying each exclusion and
            // keeping the one that cleans up the residuals best.
            let mut best: Option<(usize, f64)> = None;
            for i in 0..prepared.len() {
                let mut subset = prepared.clone();
                subset.remove(i);
                if check_count(&subset).is_err() {
                    continue;
                }
                let Ok((_, _, res, _)) = solve_position(&subset, Some((pos, clock)), true)
                else {
                    continue;
                };
                let rms = res.norm_squared() / res.len() as f64;
                if best.is_none_or(|(_, b)| rms < b) {
                    best = Some((i, rms));
                }
            }
            if let Some((i, _)) = best {
                rejected_ids.insert((prepared[i].constellation, prepared[i].sat_id));
                continue;
            }
        }
        accepted = Some((prepared, residuals, iterations));
        if moved < 1e-7 {
            break;
        }
    }
    let (prepared, residuals, iterations) = accepted.ok_or(SppError::NonConvergence(5))?;
    let rejected = rejected_ids.len();

    let mut clock_present = [false; 4];
    for c in present_constellations(&prepared) {
        clock_present[c.index()] = true;
    }
    let dop = dop_metrics(&prepared, &pos)?;
    let (vel_ecef, clock_drift) = match solve_velocity(&prepared, &pos) {
        Ok((v, d)) => (Some(v), Some(d)),
        Err(_) => (None, None),
    };
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    Ok(SppSolution {
        t: epoch.t,
        pos_ecef: pos,
        clock_bias: clock,
        clock_present,
        vel_ecef,
        clock_drift,
        residual_rms: rms,
        used_sats: prepared.len(),
        rejected_sats: rejected,
        iterations,
        dop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::{geodetic_to_ecef, Geodetic};
    use crate::gnss::types::GnssObservation;
    use crate::sim::constellation::{default_sky, synthesize_constellation};
    use crate::sim::forward::{forward_doppler, forward_pseudorange};
    use approx::assert_relative_eq;

    fn site() -> Geodetic {
        Geodetic { lat: 30.0f64.to_radians(), lon: 120.0f64.to_radians(), height: 50.0 }
    }

    /// Noiseless epoch from the synthetic constellation at the given truth.
    fn make_epoch(
        t: f64,
        rec: &Vector3<f64>,
        vel: &Vector3<f64>,
        clock: &[f64; 4],
        drift: f64,
        store: &EphemerisStore,
        iono: &IonoParams,
    ) -> EpochObservations {
        let mut observations = Vec::new();
        for eph in store.iter() {
            let Some(fwd) = forward_pseudorange(eph, t, rec, clock[eph.constellation.index()], iono)
            else {
                continue;
            };
            if fwd.elevation < 5.0f64.to_radians() {
                continue;
            }
            let doppler = forward_doppler(&fwd, rec, vel, drift, eph.constellation.carrier_wavelength());
            observations.push(GnssObservation {
                constellation: eph.constellation,
                sat_id: eph.sat_id,
                pseudorange: fwd.pseudorange,
                doppler: Some(doppler),
                wavelength: eph.constellation.carrier_wavelength(),
                noise_pr: 1.0,
                noise_dp: 0.5,
                noise_sat: 1.0,
                lock_count: 100,
                healthy: true,
            });
        }
        EpochObservations { t, observations }
    }

    fn setup() -> (f64, Vector3<f64>, EphemerisStore, IonoParams) {
        let t = 100_000.0;
        let store =
            EphemerisStore::new(synthesize_constellation(&site(), t + 60.0, &default_sky()));
        (t, geodetic_to_ecef(&site()), store, IonoParams::default())
    }

    #[test]
    fn noiseless_solution_recovers_truth() {
        let (t, rec, store, iono) = setup();
        let clock = [1.0e-4, 1.2e-4, 0.8e-4, 1.1e-4];
        let vel = Vector3::new(1.2, -0.7, 0.4);
        let epoch = make_epoch(t, &rec, &vel, &clock, 2e-7, &store, &iono);
        assert!(epoch.observations.len() >= 8, "{} visible", epoch.observations.len());
        let sol = solve_epoch(&epoch, &store, &iono, &PreprocessConfig::default()).unwrap();
        assert!((sol.pos_ecef - rec).norm() < 1e-6, "pos err {}", (sol.pos_ecef - rec).norm());
        for c in Constellation::ALL {
            assert!(sol.clock_present[c.index()]);
            assert!(
                (sol.clock_bias[c.index()] - clock[c.index()]).abs() < 1e-12,
                "clock err {:?}",
                c
            );
        }
        assert!(sol.residual_rms < 1e-6);
        let v = sol.vel_ecef.unwrap();
        assert!((v - vel).norm() < 1e-6, "vel err {}", (v - vel).norm());
        assert_relative_eq!(sol.clock_drift.unwrap(), 2e-7, epsilon = 1e-12);
    }

    #[test]
    fn count_rule_needs_three_plus_constellations() {
        let (t, rec, store, iono) = setup();
        let clock = [1.0e-4; 4];
        let mut epoch = make_epoch(t, &rec, &Vector3::zeros(), &clock, 0.0, &store, &iono);
        // Keep exactly 3 GPS: one constellation needs 4.
        epoch.observations.retain(|o| o.constellation == Constellation::Gps && o.sat_id <= 3);
        assert_eq!(epoch.observations.len(), 3);
        match solve_epoch(&epoch, &store, &iono, &PreprocessConfig::default()) {
            Err(SppError::InsufficientSatellites { found: 3, need: 4, .. }) => {}
            other => panic!("expected insufficient satellites, got {other:?}"),
        }

        // 4 GPS + 1 Glonass: two constellations, 5 needed, 5 present.
        let mut epoch = make_epoch(t, &rec, &Vector3::zeros(), &clock, 0.0, &store, &iono);
        epoch.observations.retain(|o| {
            o.constellation == Constellation::Gps
                || (o.constellation == Constellation::Glonass && o.sat_id == 1)
        });
        assert_eq!(epoch.observations.len(), 5);
        let sol = solve_epoch(&epoch, &store, &iono, &PreprocessConfig::default()).unwrap();
        assert!((sol.pos_ecef - rec).norm() < 1e-6);

        // Drop one GPS: 4 observations across 2 constellations is short.
        let mut epoch = make_epoch(t, &rec, &Vector3::zeros(), &clock, 0.0, &store, &iono);
        epoch.observations.retain(|o| {
            (o.constellation == Constellation::Gps && o.sat_id >= 2)
                || (o.constellation == Constellation::Glonass && o.sat_id == 1)
        });
        assert_eq!(epoch.observations.len(), 4);
        assert!(matches!(
            solve_epoch(&epoch, &store, &iono, &PreprocessConfig::default()),
            Err(SppError::InsufficientSatellites { found: 4, need: 5, .. })
        ));
    }

    #[test]
    fn single_outlier_is_rejected() {
        let (t, rec, store, iono) = setup();
        let clock = [1.0e-4; 4];
        let mut epoch = make_epoch(t, &rec, &Vector3::zeros(), &clock, 0.0, &store, &iono);
        epoch.observations[2].pseudorange += 50.0;
        let sol = solve_epoch(&epoch, &store, &iono, &PreprocessConfig::default()).unwrap();
        assert_eq!(sol.rejected_sats, 1);
        assert!((sol.pos_ecef - rec).norm() < 1e-6, "pos err {}", (sol.pos_ecef - rec).norm());
    }

    #[test]
    fn dop_is_sane_for_default_sky() {
        let (t, rec, store, iono) = setup();
        let epoch = make_epoch(t, &rec, &Vector3::zeros(), &[1e-4; 4], 0.0, &store, &iono);
        let sol = solve_epoch(&epoch, &store, &iono, &PreprocessConfig::default()).unwrap();
        let d = sol.dop;
        assert!(d.gdop >= d.pdop && d.pdop >= d.hdop, "{d:?}");
        assert!(d.pdop > 1.0 && d.pdop < 4.0, "pdop {}", d.pdop);
        // GDOP^2 = PDOP^2 + TDOP^2 by construction.
        assert!(d.gdop * d.gdop >= d.pdop * d.pdop);
    }

    #[test]
    fn collinear_geometry_is_singular() {
        // All satellites stacked along nearly the same line of sight.
        let (t, rec, store, iono) = setup();
        let epoch = make_epoch(t, &rec, &Vector3::zeros(), &[1e-4; 4], 0.0, &store, &iono);
        let mut prepared =
            preprocess_epoch(&epoch, &store, &rec, &iono, &PreprocessConfig::default());
        let base = prepared[0].clone();
        for (i, o) in prepared.iter_mut().enumerate() {
            o.sat_pos = base.sat_pos + Vector3::new(0.0, 0.0, 10.0 * i as f64);
        }
        assert!(matches!(dop_metrics(&prepared, &rec), Err(SppError::SingularGeometry)));
    }
}
