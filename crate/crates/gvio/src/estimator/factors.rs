//! GNSS and clock factor evaluations with analytic Jacobians.
//!
//! Pseudorange factors constrain position, one clock-bias slot, and the yaw
//! offset; Doppler factors constrain velocity, clock drift, and yaw. The
//! atmospheric and Sagnac corrections, the satellite state, the frozen line
//! of sight for Doppler, and the elevation-dependent sigmas all come from
//! preprocessing and are treated as constants, so the Jacobians here match
//! finite differences of the residuals to machine precision.

use nalgebra::{Matrix3, RowVector3, Vector3, Vector4};

use crate::constants::SPEED_OF_LIGHT;
use crate::estimator::state::AnchorFrame;
use crate::estimator::EstimatorError;
use crate::gnss::preprocess::PreparedObservation;
use crate::math::{yaw_rotation, yaw_rotation_deriv};

/// Pseudorange residual (m) and Jacobians with respect to body position in
/// the world frame, the 4-vector clock bias (m), and the yaw offset.
#[derive(Debug, Clone)]
pub struct PseudorangeEval {
    pub residual: f64,
    pub j_p: RowVector3<f64>,
    pub j_clk: Vector4<f64>,
    pub j_psi: f64,
    pub sigma: f64,
}

/// Doppler residual (Hz) and Jacobians with respect to body velocity in the
/// world frame, the scalar clock drift (m/s), and the yaw offset.
#[derive(Debug, Clone)]
pub struct DopplerEval {
    pub residual: f64,
    pub j_v: RowVector3<f64>,
    pub j_drift: f64,
    pub j_psi: f64,
    pub sigma: f64,
}

/// World-to-ECEF rotation for the current yaw estimate.
fn world_to_ecef(anchor: &AnchorFrame, yaw: f64) -> Matrix3<f64> {
    anchor.r_en * yaw_rotation(yaw)
}

pub fn pseudorange_factor_eval(
    anchor: &AnchorFrame,
    yaw: f64,
    p_w: &Vector3<f64>,
    clock_m: &Vector4<f64>,
    obs: &PreparedObservation,
) -> PseudorangeEval {
    let r_we = world_to_ecef(anchor, yaw);
    let p_ecef = anchor.anchor_ecef + r_we * p_w;
    let los = obs.sat_pos - p_ecef;
    let range = los.norm();
    let kappa = los / range;
    let zeta = obs.constellation.indicator();
    let predicted = range + zeta.dot(clock_m) - SPEED_OF_LIGHT * obs.sat_clock_bias
        + obs.tropo
        + obs.iono
        + obs.sagnac;
    let j_psi_vec = anchor.r_en * yaw_rotation_deriv(yaw) * p_w;
    PseudorangeEval {
        residual: predicted - obs.pseudorange,
        j_p: -(kappa.transpose() * r_we),
        j_clk: zeta,
        j_psi: -kappa.dot(&j_psi_vec),
        sigma: obs.sigma_pr,
    }
}

/// Evaluates the Doppler factor; returns None when the observation carries no
/// Doppler measurement.
pub fn doppler_factor_eval(
    anchor: &AnchorFrame,
    yaw: f64,
    v_w: &Vector3<f64>,
    drift_m: f64,
    obs: &PreparedObservation,
) -> Option<DopplerEval> {
    let measured = obs.doppler?;
    let r_we = world_to_ecef(anchor, yaw);
    let v_ecef = r_we * v_w;
    let kappa = obs.unit_to_sat;
    let inv_lambda = 1.0 / obs.wavelength;
    let residual = inv_lambda * kappa.dot(&(obs.sat_vel - v_ecef))
        + inv_lambda * (drift_m - SPEED_OF_LIGHT * obs.sat_clock_drift)
        + measured;
    let j_psi_vec = anchor.r_en * yaw_rotation_deriv(yaw) * v_w;
    Some(DopplerEval {
        residual,
        j_v: -inv_lambda * (kappa.transpose() * r_we),
        j_drift: inv_lambda,
        j_psi: -inv_lambda * kappa.dot(&j_psi_vec),
        sigma: obs.sigma_dp,
    })
}

/// Clock evolution residuals between consecutive keyframes: the 4-vector
/// bias-chain residual and the scalar drift random-walk residual, both in
/// meters (c times the seconds formulation). The Jacobians are constant:
/// bias chain: d/d(clk_a) = -I, d/d(drift_a) = -tau * 1, d/d(clk_b) = I;
/// drift walk: d/d(drift_a) = -1, d/d(drift_b) = 1.
pub fn clock_factor_eval(
    clock_a: &Vector4<f64>,
    drift_a: f64,
    clock_b: &Vector4<f64>,
    drift_b: f64,
    tau: f64,
) -> Result<(Vector4<f64>, f64), EstimatorError> {
    if tau <= 0.0 {
        return Err(EstimatorError::NonPositiveInterval(tau));
    }
    let r_chain = clock_b - clock_a - Vector4::repeat(drift_a * tau);
    let r_walk = drift_b - drift_a;
    Ok((r_chain, r_walk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnss::measurement::{predict_doppler, predict_pseudorange};
    use crate::gnss::types::{Constellation, SatelliteState};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn anchor() -> AnchorFrame {
        let site = crate::frames::Geodetic {
            lat: 30.0f64.to_radians(),
            lon: 120.0f64.to_radians(),
            height: 50.0,
        };
        AnchorFrame::new(crate::frames::geodetic_to_ecef(&site)).unwrap()
    }

    /// Builds an observation whose measurement is generated by the exact
    /// forward model at the given truth, with corrections frozen at truth.
    fn consistent_obs(
        anchor: &AnchorFrame,
        yaw: f64,
        p_w: &Vector3<f64>,
        v_w: &Vector3<f64>,
        clock_m: &Vector4<f64>,
        drift_m: f64,
        c: Constellation,
    ) -> PreparedObservation {
        let r_we = anchor.r_en * yaw_rotation(yaw);
        let rec = anchor.anchor_ecef + r_we * p_w;
        let vel = r_we * v_w;
        let up = rec.normalize();
        let east = Vector3::z().cross(&up).normalize();
        let sat = SatelliteState {
            pos: rec + (0.8 * up + 0.6 * east) * 2.2e7,
            vel: Vector3::new(310.0, -2650.0, 1930.0),
            clock_bias: 4.2e-4,
            clock_drift: 3.1e-10,
        };
        let wavelength = c.carrier_wavelength();
        let bias_s = clock_m[c.index()] / SPEED_OF_LIGHT;
        let drift_s = drift_m / SPEED_OF_LIGHT;
        let (tropo, iono) = (4.3, 2.1);
        let pseudorange = predict_pseudorange(&sat, &rec, bias_s, tropo, iono);
        let doppler = predict_doppler(&sat, &rec, &vel, drift_s, wavelength);
        PreparedObservation {
            constellation: c,
            sat_id: 7,
            pseudorange,
            doppler: Some(doppler),
            wavelength,
            sat_pos: sat.pos,
            sat_vel: sat.vel,
            sat_clock_bias: sat.clock_bias,
            sat_clock_drift: sat.clock_drift,
            tropo,
            iono,
            sagnac: crate::frames::sagnac_correction(&sat.pos, &rec),
            unit_to_sat: (sat.pos - rec).normalize(),
            elevation: 0.9,
            sigma_pr: 1.3,
            sigma_dp: 0.6,
        }
    }

    #[test]
    fn residuals_vanish_at_the_generating_state() {
        let anchor = anchor();
        let yaw = 0.35;
        let p = Vector3::new(4.0, -7.0, 1.5);
        let v = Vector3::new(1.2, 0.4, -0.3);
        let clock = Vector4::new(15000.0, 18600.0, 13200.0, 17100.0);
        let drift = 30.0;
        let obs = consistent_obs(&anchor, yaw, &p, &v, &clock, drift, Constellation::Galileo);
        let pr = pseudorange_factor_eval(&anchor, yaw, &p, &clock, &obs);
        assert!(pr.residual.abs() < 1e-6, "pseudorange residual {}", pr.residual);
        let dp = doppler_factor_eval(&anchor, yaw, &v, drift, &obs).unwrap();
        assert!(dp.residual.abs() < 1e-9, "doppler residual {}", dp.residual);
    }

    #[test]
    fn clock_slot_is_one_hot() {
        let anchor = anchor();
        let yaw = -0.2;
        let p = Vector3::new(1.0, 2.0, 0.5);
        let clock = Vector4::new(100.0, 200.0, 300.0, 400.0);
        let obs = consistent_obs(
            &anchor,
            yaw,
            &p,
            &Vector3::zeros(),
            &clock,
            0.0,
            Constellation::Beidou,
        );
        let base = pseudorange_factor_eval(&anchor, yaw, &p, &clock, &obs).residual;
        for c in Constellation::ALL {
            let mut bumped = clock;
            bumped[c.index()] += 5.0;
            let r = pseudorange_factor_eval(&anchor, yaw, &p, &bumped, &obs).residual;
            let expect = if c == Constellation::Beidou { 5.0 } else { 0.0 };
            assert_relative_eq!(r - base, expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn pseudorange_jacobians_match_finite_differences() {
        let anchor = anchor();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        // The raw range is ~2.6e7 m, so differences below ~1e-8 of it drown in
        // rounding. Steps are sized per block: generous for the linear clock
        // column, balanced against truncation for position and yaw.
        let h_p = 0.05;
        let h_c = 100.0;
        let h_y = 1e-3;
        for _ in 0..120 {
            let yaw = rng.gen_range(-3.0..3.0);
            let p = Vector3::new(
                rng.gen_range(-15.0..15.0),
                rng.gen_range(-15.0..15.0),
                rng.gen_range(-5.0..5.0),
            );
            let clock = Vector4::from_fn(|_, _| rng.gen_range(1e4..2e4));
            let c = Constellation::ALL[rng.gen_range(0..4)];
            let obs = consistent_obs(&anchor, yaw, &p, &Vector3::zeros(), &clock, 0.0, c);
            // Evaluate away from the generating state to test a generic point.
            let p = p + Vector3::new(0.8, -1.1, 0.4);
            let yaw = yaw + 0.02;
            let eval = eval_pr(&anchor, yaw, &p, &clock, &obs);
            for a in 0..3 {
                let mut pp = p;
                pp[a] += h_p;
                let mut pm = p;
                pm[a] -= h_p;
                let fd = (eval_pr(&anchor, yaw, &pp, &clock, &obs).residual
                    - eval_pr(&anchor, yaw, &pm, &clock, &obs).residual)
                    / (2.0 * h_p);
                assert_relative_eq!(eval.j_p[a], fd, max_relative = 1e-6, epsilon = 1e-7);
            }
            for s in 0..4 {
                let mut cp = clock;
                cp[s] += h_c;
                let mut cm = clock;
                cm[s] -= h_c;
                let fd = (eval_pr(&anchor, yaw, &p, &cp, &obs).residual
                    - eval_pr(&anchor, yaw, &p, &cm, &obs).residual)
                    / (2.0 * h_c);
                assert_relative_eq!(eval.j_clk[s], fd, max_relative = 1e-9, epsilon = 1e-10);
            }
            let fd = (eval_pr(&anchor, yaw + h_y, &p, &clock, &obs).residual
                - eval_pr(&anchor, yaw - h_y, &p, &clock, &obs).residual)
                / (2.0 * h_y);
            assert_relative_eq!(eval.j_psi, fd, max_relative = 1e-6, epsilon = 2e-5);
        }
    }

    // Local alias so the finite-difference loops stay readable.
    fn eval_pr(
        anchor: &AnchorFrame,
        yaw: f64,
        p: &Vector3<f64>,
        clock: &Vector4<f64>,
        obs: &PreparedObservation,
    ) -> PseudorangeEval {
        pseudorange_factor_eval(anchor, yaw, p, clock, obs)
    }

    #[test]
    fn doppler_jacobians_match_finite_differences() {
        let anchor = anchor();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // Velocity and drift enter linearly, so wide steps dodge the rounding
        // floor of the ~1e4 Hz raw prediction; yaw needs a small step.
        let h_v = 1.0;
        let h_d = 1.0;
        let h_y = 1e-4;
        for _ in 0..120 {
            let yaw = rng.gen_range(-3.0..3.0);
            let v = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.0..1.0),
            );
            let drift = rng.gen_range(10.0..60.0);
            let c = Constellation::ALL[rng.gen_range(0..4)];
            let obs =
                consistent_obs(&anchor, yaw, &Vector3::new(2.0, 1.0, 0.3), &v, &Vector4::zeros(), drift, c);
            let v = v + Vector3::new(0.2, -0.1, 0.05);
            let yaw = yaw - 0.03;
            let eval = doppler_factor_eval(&anchor, yaw, &v, drift, &obs).unwrap();
            for a in 0..3 {
                let mut vp = v;
                vp[a] += h_v;
                let mut vm = v;
                vm[a] -= h_v;
                let fd = (doppler_factor_eval(&anchor, yaw, &vp, drift, &obs).unwrap().residual
                    - doppler_factor_eval(&anchor, yaw, &vm, drift, &obs).unwrap().residual)
                    / (2.0 * h_v);
                assert_relative_eq!(eval.j_v[a], fd, max_relative = 1e-9, epsilon = 1e-10);
            }
            let fd = (doppler_factor_eval(&anchor, yaw, &v, drift + h_d, &obs).unwrap().residual
                - doppler_factor_eval(&anchor, yaw, &v, drift - h_d, &obs).unwrap().residual)
                / (2.0 * h_d);
            assert_relative_eq!(eval.j_drift, fd, max_relative = 1e-9, epsilon = 1e-10);
            let fd = (doppler_factor_eval(&anchor, yaw + h_y, &v, drift, &obs).unwrap().residual
                - doppler_factor_eval(&anchor, yaw - h_y, &v, drift, &obs).unwrap().residual)
                / (2.0 * h_y);
            assert_relative_eq!(eval.j_psi, fd, max_relative = 1e-6, epsilon = 1e-7);
        }
    }

    #[test]
    fn clock_factors_are_exact_on_constant_drift() {
        let tau = 0.4;
        let drift = 30.0;
        let a = Vector4::new(100.0, 120.0, 90.0, 110.0);
        let b = a + Vector4::repeat(drift * tau);
        let (r_chain, r_walk) = clock_factor_eval(&a, drift, &b, drift, tau).unwrap();
        assert!(r_chain.norm() < 1e-12);
        assert_eq!(r_walk, 0.0);

        // A drift step appears verbatim in the walk residual.
        let (_, r_walk) = clock_factor_eval(&a, drift, &b, drift + 2.5, tau).unwrap();
        assert_relative_eq!(r_walk, 2.5);

        assert!(matches!(
            clock_factor_eval(&a, drift, &b, drift, 0.0),
            Err(EstimatorError::NonPositiveInterval(_))
        ));
    }

    #[test]
    fn doppler_requires_a_measurement() {
        let anchor = anchor();
        let mut obs = consistent_obs(
            &anchor,
            0.0,
            &Vector3::zeros(),
            &Vector3::zeros(),
            &Vector4::zeros(),
            0.0,
            Constellation::Gps,
        );
        obs.doppler = None;
        assert!(doppler_factor_eval(&anchor, 0.0, &Vector3::zeros(), 0.0, &obs).is_none());
    }
}
