//! Coarse-to-fine alignment of the visual-inertial local world frame with
//! ECEF: a simulation-grade VI bootstrap, a joint coarse anchor solve over
//! every pseudorange in the window, Doppler-based yaw-offset calibration
//! with the VIO velocities held fixed, and an anchor refinement that adds
//! per-epoch clock biases tied together by clock-evolution factors.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::constants::SPEED_OF_LIGHT;
use crate::estimator::factors::{doppler_factor_eval, pseudorange_factor_eval};
use crate::estimator::state::AnchorFrame;
use crate::estimator::EstimatorError;
use crate::frames::{sagnac_gradient_wrt_receiver, FrameAlignment};
use crate::gnss::measurement::predict_pseudorange;
use crate::gnss::preprocess::{preprocess_epoch, PreparedObservation};
use crate::gnss::types::{Constellation, EpochObservations, IonoParams};
use crate::gnss::{EphemerisStore, PreprocessConfig};
use crate::math::yaw_rotation;
use crate::sim::synth::Dataset;
use crate::spp::SppError;

/// Speed (m/s) below which the Doppler yaw solve is declared degenerate.
pub const YAW_SPEED_THRESHOLD: f64 = 0.5;
/// Coarse ψ grid resolution; the objective is periodic and Gauss-Newton
/// alone can settle in the wrong basin.
const YAW_GRID_POINTS: usize = 24;
/// Minimum GNSS epochs before the staged initialization may run.
pub const MIN_INIT_EPOCHS: usize = 10;
/// Clock-evolution residual sigma (s) used during anchor refinement,
/// matching the main estimator's chain whitening.
const CHAIN_SIGMA: f64 = 1e-8;

/// One keyframe of the initialization window: the VIO state in the
/// gravity-aligned local world frame.
#[derive(Debug, Clone)]
pub struct InitKeyframe {
    /// Relative time (s), same timebase as the dataset truth records.
    pub t: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
}

/// Everything the GNSS alignment stages consume: a metrically scaled VI
/// trajectory and the raw GNSS epochs overlapping it.
#[derive(Debug, Clone)]
pub struct InitWindow {
    pub keyframes: Vec<InitKeyframe>,
    /// Raw epochs stamped with absolute GNSS seconds.
    pub epochs: Vec<EpochObservations>,
    /// GNSS time of week at relative time zero (s).
    pub t0: f64,
    pub store: EphemerisStore,
    pub iono: IonoParams,
    pub preprocess: PreprocessConfig,
}

impl InitWindow {
    /// Gathers the GNSS epochs bracketed by the keyframes of `keyframes`
    /// from the dataset.
    pub fn new(keyframes: Vec<InitKeyframe>, dataset: &Dataset) -> Self {
        let (start, end) = match (keyframes.first(), keyframes.last()) {
            (Some(a), Some(b)) => (a.t - 1e-6, b.t + 1e-6),
            _ => (0.0, -1.0),
        };
        let t0 = dataset.config.t0;
        let epochs = dataset
            .gnss
            .iter()
            .filter(|e| {
                let t_rel = e.t - t0;
                t_rel >= start && t_rel <= end && !e.observations.is_empty()
            })
            .cloned()
            .collect();
        Self {
            keyframes,
            epochs,
            t0,
            store: dataset.ephemeris_store(),
            iono: dataset.iono,
            preprocess: PreprocessConfig::default(),
        }
    }

    /// VIO position and velocity at relative time `t_rel`, linearly
    /// interpolated between the bracketing keyframes. None outside the
    /// keyframe span.
    pub fn interpolate(&self, t_rel: f64) -> Option<(Vector3<f64>, Vector3<f64>)> {
        const EPS: f64 = 1e-6;
        let kfs = &self.keyframes;
        let (first, last) = (kfs.first()?, kfs.last()?);
        if t_rel < first.t - EPS || t_rel > last.t + EPS {
            return None;
        }
        let j = kfs.partition_point(|k| k.t <= t_rel);
        if j == 0 {
            return Some((first.p, first.v));
        }
        if j == kfs.len() {
            return Some((last.p, last.v));
        }
        let (a, b) = (&kfs[j - 1], &kfs[j]);
        let w = ((t_rel - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        Some(((1.0 - w) * a.p + w * b.p, (1.0 - w) * a.v + w * b.v))
    }

    /// Mean speed of the VI trajectory (m/s).
    pub fn average_speed(&self) -> f64 {
        if self.keyframes.is_empty() {
            return 0.0;
        }
        self.keyframes.iter().map(|k| k.v.norm()).sum::<f64>() / self.keyframes.len() as f64
    }
}

/// Perturbation applied to the truth-derived VI states, modeling the error
/// of a real visual-inertial bootstrap: one common attitude rotation of the
/// local frame plus a shared velocity offset, with biases starting at zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    /// Magnitude of the common attitude perturbation (rad).
    pub attitude_perturbation: f64,
    /// Magnitude of the shared velocity offset (m/s).
    pub velocity_perturbation: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            attitude_perturbation: 2.0f64.to_radians(),
            velocity_perturbation: 0.1,
            seed: 0,
        }
    }
}

/// Accelerometer variance (m²/s⁴) below which VI initialization is refused:
/// without excitation the metric scale and gravity direction are not
/// observable by a real bootstrap, so the simulated one refuses too.
pub const MIN_ACCEL_VARIANCE: f64 = 0.05;

/// Simulation-grade VI bootstrap over the first `n_frames` camera frames:
/// gravity-aligned metric states from the dataset truth with the configured
/// perturbation applied coherently to the whole window.
pub fn vi_bootstrap(
    dataset: &Dataset,
    n_frames: usize,
    cfg: &BootstrapConfig,
) -> Result<Vec<InitKeyframe>, EstimatorError> {
    let have = dataset.frames.len().min(dataset.truth.len());
    if n_frames < 2 || have < n_frames {
        return Err(EstimatorError::WindowTooSmall { found: have, need: n_frames.max(2) });
    }
    let t_start = dataset.truth[0].t;
    let t_end = dataset.truth[n_frames - 1].t;
    let window_imu: Vec<Vector3<f64>> = dataset
        .imu
        .iter()
        .filter(|s| s.t >= t_start - 1e-9 && s.t <= t_end + 1e-9)
        .map(|s| s.accel)
        .collect();
    if window_imu.len() >= 2 {
        let mean = window_imu.iter().sum::<Vector3<f64>>() / window_imu.len() as f64;
        let var = window_imu.iter().map(|a| (a - mean).norm_squared()).sum::<f64>()
            / window_imu.len() as f64;
        if var < MIN_ACCEL_VARIANCE {
            return Err(EstimatorError::InsufficientExcitation(var));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dq = if cfg.attitude_perturbation != 0.0 {
        let axis: [f64; 3] = UnitSphere.sample(&mut rng);
        UnitQuaternion::from_scaled_axis(
            Vector3::from(axis) * cfg.attitude_perturbation,
        )
    } else {
        UnitQuaternion::identity()
    };
    let dv = if cfg.velocity_perturbation != 0.0 {
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        Vector3::from(dir) * cfg.velocity_perturbation
    } else {
        Vector3::zeros()
    };

    Ok(dataset.truth[..n_frames]
        .iter()
        .map(|tr| InitKeyframe {
            t: tr.t,
            p: dq * tr.state.p,
            v: dq * tr.state.v + dv,
            q: dq * tr.state.q,
        })
        .collect())
}

/// Result of the joint coarse anchor solve.
#[derive(Debug, Clone)]
pub struct CoarseAnchor {
    pub pos_ecef: Vector3<f64>,
    /// Half sum of squared whitened pseudorange residuals at the solution.
    pub cost: f64,
    pub used_pseudoranges: usize,
    pub iterations: usize,
}

/// Per-epoch prepared observations without position-dependent corrections,
/// for the cold-start pass of the coarse solve.
fn bootstrap_prepared(win: &InitWindow) -> Vec<Vec<PreparedObservation>> {
    win.epochs
        .iter()
        .map(|epoch| {
            let mut out = Vec::new();
            for o in &epoch.observations {
                if !o.healthy || o.lock_count < win.preprocess.min_lock_count {
                    continue;
                }
                let Ok(eph) = win.store.lookup(o.constellation, o.sat_id, epoch.t) else {
                    continue;
                };
                if eph.health != 0 {
                    continue;
                }
                let Ok((_t_tx, sat)) = crate::gnss::measurement::transmit_time(
                    eph,
                    epoch.t,
                    o.pseudorange,
                    win.preprocess.ephemeris_validity,
                ) else {
                    continue;
                };
                out.push(PreparedObservation {
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
                })
            }
            out
        })
        .collect()
}

/// Joint Gauss-Newton over one shared receiver position and per-epoch,
/// per-constellation clock biases. Returns the position, the biases (s)
/// indexed like the input epochs, the final half-cost, and the iteration
/// count.
#[allow(clippy::type_complexity)]
fn joint_position_solve(
    epochs: &[Vec<PreparedObservation>],
    initial: Option<(Vector3<f64>, Vec<[f64; 4]>)>,
    weighted: bool,
) -> Result<(Vector3<f64>, Vec<[f64; 4]>, f64, usize), SppError> {
    // Per-epoch clock slots for the constellations that epoch actually saw.
    let slots: Vec<Vec<Constellation>> = epochs
        .iter()
        .map(|obs| {
            let mut present = [false; 4];
            for o in obs {
                present[o.constellation.index()] = true;
            }
            Constellation::ALL.into_iter().filter(|c| present[c.index()]).collect()
        })
        .collect();
    let total_obs: usize = epochs.iter().map(Vec::len).sum();
    let clock_unknowns: usize = slots.iter().map(Vec::len).sum();
    let n_unknowns = 3 + clock_unknowns;
    let mut distinct = [false; 4];
    for obs in epochs {
        for o in obs {
            distinct[o.constellation.index()] = true;
        }
    }
    let n_const = distinct.iter().filter(|p| **p).count();
    if n_const == 0 || total_obs < n_unknowns {
        return Err(SppError::InsufficientSatellites {
            found: total_obs,
            need: n_unknowns.max(4),
            constellations: n_const,
        });
    }

    let (mut pos, mut clocks) =
        initial.unwrap_or((Vector3::zeros(), vec![[0.0; 4]; epochs.len()]));
    let mut clock_col_base = Vec::with_capacity(epochs.len());
    let mut base = 3;
    for s in &slots {
        clock_col_base.push(base);
        base += s.len();
    }

    const MAX_ITERATIONS: usize = 10;
    const STEP_TOLERANCE: f64 = 1e-4;
    let mut residuals = DVector::zeros(total_obs);
    for iter in 0..MAX_ITERATIONS {
        let mut jac = DMatrix::zeros(total_obs, n_unknowns);
        let plausible = pos.norm() > 1e6;
        let mut row = 0;
        for (k, obs) in epochs.iter().enumerate() {
            for o in obs {
                let sat = o.satellite_state();
                let bias = clocks[k][o.constellation.index()];
                residuals[row] =
                    predict_pseudorange(&sat, &pos, bias, o.tropo, o.iono) - o.pseudorange;
                let kappa = (o.sat_pos - pos).normalize();
                let grad = -kappa + sagnac_gradient_wrt_receiver(&o.sat_pos);
                let w = if weighted && plausible { 1.0 / o.sigma_pr } else { 1.0 };
                for a in 0..3 {
                    jac[(row, a)] = grad[a] * w;
                }
                let slot =
                    slots[k].iter().position(|c| *c == o.constellation).expect("present");
                jac[(row, clock_col_base[k] + slot)] = w;
                residuals[row] *= w;
                row += 1;
            }
        }
        let h = jac.transpose() * &jac;
        let g = jac.transpose() * &residuals;
        let step = h.cholesky().ok_or(SppError::SingularGeometry)?.solve(&(-g));
        pos += Vector3::new(step[0], step[1], step[2]);
        for (k, epoch_slots) in slots.iter().enumerate() {
            for (s, c) in epoch_slots.iter().enumerate() {
                clocks[k][c.index()] += step[clock_col_base[k] + s] / SPEED_OF_LIGHT;
            }
        }
        if step.norm() < STEP_TOLERANCE {
            let mut cost = 0.0;
            let mut row = 0;
            for (k, obs) in epochs.iter().enumerate() {
                for o in obs {
                    let sat = o.satellite_state();
                    let bias = clocks[k][o.constellation.index()];
                    let r = predict_pseudorange(&sat, &pos, bias, o.tropo, o.iono) - o.pseudorange;
                    let w = if weighted { 1.0 / o.sigma_pr } else { 1.0 };
                    cost += 0.5 * (r * w) * (r * w);
                    row += 1;
                }
            }
            debug_assert_eq!(row, total_obs);
            return Ok((pos, clocks, cost, iter + 1));
        }
    }
    Err(SppError::NonConvergence(MAX_ITERATIONS))
}

/// Coarse anchor localization: one shared position over every pseudorange
/// in the window with per-epoch clock-bias sets, so the result is an
/// average location of the window.
pub fn coarse_anchor(win: &InitWindow) -> Result<CoarseAnchor, EstimatorError> {
    // Cold start without corrections, then re-prepare at the solution so
    // elevation masks, weights, and atmospheric corrections apply.
    let coarse = bootstrap_prepared(win);
    let (mut pos, mut clocks, _, _) = joint_position_solve(&coarse, None, false)?;
    let mut result = None;
    // The frozen corrections move by millimeters per meter of approximate
    // position error (Sagnac dominates), so each refresh contracts the
    // error by ~1e-3; six rounds reach micrometers from a cold start.
    for _ in 0..6 {
        let prepared: Vec<Vec<PreparedObservation>> = win
            .epochs
            .iter()
            .map(|e| preprocess_epoch(e, &win.store, &pos, &win.iono, &win.preprocess))
            .collect();
        let (p, c, cost, iterations) =
            joint_position_solve(&prepared, Some((pos, clocks.clone())), true)?;
        let moved = (p - pos).norm();
        pos = p;
        clocks = c;
        result = Some(CoarseAnchor {
            pos_ecef: pos,
            cost,
            used_pseudoranges: prepared.iter().map(Vec::len).sum(),
            iterations,
        });
        if moved < 1e-7 {
            break;
        }
    }
    Ok(result.expect("at least one refinement round runs"))
}

/// Result of the Doppler yaw-offset calibration.
#[derive(Debug, Clone, Copy)]
pub struct YawCalibration {
    /// Yaw offset ψ (rad), normalized to (-π, π].
    pub psi: f64,
    /// Shared receiver clock drift (s/s).
    pub clock_drift: f64,
    /// Half sum of squared whitened Doppler residuals at the solution.
    pub cost: f64,
    pub epochs_used: usize,
}

/// The fixed ingredients of the yaw objective: per-observation VIO
/// velocity and prepared Doppler measurement, with geometry frozen at the
/// coarse anchor.
struct YawProblem {
    anchor: AnchorFrame,
    items: Vec<(Vector3<f64>, PreparedObservation)>,
    epochs_used: usize,
}

impl YawProblem {
    fn build(win: &InitWindow, coarse: &Vector3<f64>) -> Result<Self, EstimatorError> {
        let anchor = AnchorFrame::new(*coarse)?;
        let mut items = Vec::new();
        let mut epochs_used = 0;
        for epoch in &win.epochs {
            let Some((_, v)) = win.interpolate(epoch.t - win.t0) else { continue };
            let prepared = preprocess_epoch(epoch, &win.store, coarse, &win.iono, &win.preprocess);
            let with_doppler: Vec<&PreparedObservation> =
                prepared.iter().filter(|o| o.doppler.is_some()).collect();
            if with_doppler.len() < 2 {
                continue;
            }
            epochs_used += 1;
            items.extend(with_doppler.into_iter().map(|o| (v, o.clone())));
        }
        if items.is_empty() {
            return Err(EstimatorError::Gnss(SppError::InsufficientSatellites {
                found: 0,
                need: 2,
                constellations: 0,
            }));
        }
        Ok(Self { anchor, items, epochs_used })
    }

    /// Half-cost at `psi` with the drift minimized in closed form (the
    /// residual is linear in the drift). Returns (cost, best drift in m/s).
    fn cost_at(&self, psi: f64) -> (f64, f64) {
        let mut num = 0.0;
        let mut den = 0.0;
        for (v, obs) in &self.items {
            let ev = doppler_factor_eval(&self.anchor, psi, v, 0.0, obs)
                .expect("items carry doppler");
            let w2 = 1.0 / (ev.sigma * ev.sigma);
            num -= w2 * ev.residual * ev.j_drift;
            den += w2 * ev.j_drift * ev.j_drift;
        }
        let drift = if den > 0.0 { num / den } else { 0.0 };
        let mut cost = 0.0;
        for (v, obs) in &self.items {
            let ev = doppler_factor_eval(&self.anchor, psi, v, drift, obs)
                .expect("items carry doppler");
            let r = ev.residual / ev.sigma;
            cost += 0.5 * r * r;
        }
        (cost, drift)
    }
}

/// Samples the yaw objective (drift minimized out) at `n` uniformly spaced
/// ψ values over (-π, π]. Returns (ψ, cost) pairs; used by the calibration
/// itself for basin selection and by tests for the global-minimum check.
pub fn yaw_scan(
    win: &InitWindow,
    coarse: &Vector3<f64>,
    n: usize,
) -> Result<Vec<(f64, f64)>, EstimatorError> {
    let problem = YawProblem::build(win, coarse)?;
    Ok((0..n)
        .map(|i| {
            let psi = -std::f64::consts::PI + (i + 1) as f64 * std::f64::consts::TAU / n as f64;
            (psi, problem.cost_at(psi).0)
        })
        .collect())
}

/// Yaw-offset calibration from Doppler: minimizes the whitened Doppler
/// residuals over (ψ, shared clock drift) with the VIO velocities fixed,
/// seeding Gauss-Newton from the best point of a coarse ψ grid.
pub fn calibrate_yaw(
    win: &InitWindow,
    coarse: &Vector3<f64>,
) -> Result<YawCalibration, EstimatorError> {
    let speed = win.average_speed();
    if speed < YAW_SPEED_THRESHOLD {
        return Err(EstimatorError::DegenerateMotion { speed, threshold: YAW_SPEED_THRESHOLD });
    }
    let problem = YawProblem::build(win, coarse)?;

    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..YAW_GRID_POINTS {
        let psi = -std::f64::consts::PI
            + (i + 1) as f64 * std::f64::consts::TAU / YAW_GRID_POINTS as f64;
        let (cost, drift) = problem.cost_at(psi);
        if cost < best.0 {
            best = (cost, psi, drift);
        }
    }
    let (_, mut psi, mut drift) = best;

    const MAX_ITERATIONS: usize = 30;
    for _ in 0..MAX_ITERATIONS {
        let mut h = nalgebra::Matrix2::<f64>::zeros();
        let mut g = nalgebra::Vector2::<f64>::zeros();
        let mut cost = 0.0;
        for (v, obs) in &problem.items {
            let ev = doppler_factor_eval(&problem.anchor, psi, v, drift, obs)
                .expect("items carry doppler");
            let w = 1.0 / ev.sigma;
            let row = nalgebra::Vector2::new(ev.j_psi * w, ev.j_drift * w);
            h += row * row.transpose();
            g += row * (ev.residual * w);
            cost += 0.5 * (ev.residual * w) * (ev.residual * w);
        }
        let step = h.cholesky().map(|c| c.solve(&(-g))).ok_or_else(|| {
            EstimatorError::RankDeficient { direction: "yaw calibration normal equations".into() }
        })?;
        psi += step[0];
        drift += step[1];
        if step.norm() < 1e-9 {
            return Ok(YawCalibration {
                psi: crate::math::normalize_angle(psi),
                clock_drift: drift / SPEED_OF_LIGHT,
                cost,
                epochs_used: problem.epochs_used,
            });
        }
    }
    Err(EstimatorError::NonConvergence(MAX_ITERATIONS))
}

/// Result of the anchor refinement stage.
#[derive(Debug, Clone)]
pub struct RefinedAnchor {
    /// Alignment mapping the local-world origin to the refined anchor.
    pub alignment: FrameAlignment,
    /// Absolute time of each used epoch (s).
    pub epoch_times: Vec<f64>,
    /// Receiver clock bias per constellation slot at each used epoch (s);
    /// zero where the slot is unconstrained.
    pub clocks: Vec<Vector4<f64>>,
    /// Constellation slots each epoch's solution actually constrains.
    pub clock_present: Vec<[bool; 4]>,
    /// Cost at the coarse-anchor starting state, for the descent check.
    pub start_cost: f64,
    /// Half sum of squared whitened residuals at the solution.
    pub cost: f64,
    pub iterations: usize,
}

/// One inner Gauss-Newton solve of the refinement objective against a fixed
/// prepared-observation set. Returns the final cost; `start_cost` receives
/// the cost at the entry state.
#[allow(clippy::too_many_arguments)]
fn refine_solve(
    epochs: &[(f64, Vector3<f64>, Vec<PreparedObservation>)],
    slots: &[Vec<Constellation>],
    psi: f64,
    drift_m: f64,
    use_clock_chain: bool,
    anchor_pos: &mut Vector3<f64>,
    clocks_m: &mut Vec<Vector4<f64>>,
    start_cost: &mut Option<f64>,
    iterations: &mut usize,
) -> Result<f64, EstimatorError> {
    let n_epochs = epochs.len();
    let total_obs: usize = epochs.iter().map(|(_, _, o)| o.len()).sum();
    let chain_rows = if use_clock_chain {
        n_epochs.saturating_sub(1) * slots.first().map_or(0, Vec::len)
    } else {
        0
    };
    let mut col_base = Vec::with_capacity(n_epochs);
    let mut n_unknowns = 3;
    for s in slots {
        col_base.push(n_unknowns);
        n_unknowns += s.len();
    }
    if n_epochs == 0 || total_obs + chain_rows < n_unknowns {
        let constellations = {
            let mut seen = [false; 4];
            for s in slots {
                for c in s {
                    seen[c.index()] = true;
                }
            }
            seen.iter().filter(|p| **p).count()
        };
        return Err(EstimatorError::Gnss(SppError::InsufficientSatellites {
            found: total_obs,
            need: n_unknowns,
            constellations,
        }));
    }

    let chain_w = 1.0 / (SPEED_OF_LIGHT * CHAIN_SIGMA);
    let eval_cost = |anchor_pos: &Vector3<f64>, clocks_m: &[Vector4<f64>]| -> Option<f64> {
        let frame = AnchorFrame::new(*anchor_pos).ok()?;
        let mut cost = 0.0;
        for (k, (_, p, obs)) in epochs.iter().enumerate() {
            for o in obs {
                let ev = pseudorange_factor_eval(&frame, psi, p, &clocks_m[k], o);
                let r = ev.residual / ev.sigma;
                cost += 0.5 * r * r;
            }
        }
        if use_clock_chain {
            for k in 0..n_epochs.saturating_sub(1) {
                let tau = epochs[k + 1].0 - epochs[k].0;
                for c in &slots[k] {
                    let i = c.index();
                    let r = (clocks_m[k + 1][i] - clocks_m[k][i] - drift_m * tau) * chain_w;
                    cost += 0.5 * r * r;
                }
            }
        }
        cost.is_finite().then_some(cost)
    };

    let mut cost = eval_cost(anchor_pos, clocks_m).ok_or(EstimatorError::NonConvergence(0))?;
    start_cost.get_or_insert(cost);
    const MAX_ITERATIONS: usize = 15;
    for _ in 0..MAX_ITERATIONS {
        *iterations += 1;
        let frame = AnchorFrame::new(*anchor_pos)?;
        let r_we = frame.r_en * yaw_rotation(psi);
        let n_rows = total_obs + chain_rows;
        let mut jac = DMatrix::zeros(n_rows, n_unknowns);
        let mut res = DVector::zeros(n_rows);
        let mut row = 0;
        for (k, (_, p, obs)) in epochs.iter().enumerate() {
            for o in obs {
                let ev = pseudorange_factor_eval(&frame, psi, p, &clocks_m[k], o);
                let w = 1.0 / ev.sigma;
                let j_anchor = ev.j_p * r_we.transpose();
                for a in 0..3 {
                    jac[(row, a)] = j_anchor[a] * w;
                }
                for (s, c) in slots[k].iter().enumerate() {
                    jac[(row, col_base[k] + s)] = ev.j_clk[c.index()] * w;
                }
                res[row] = ev.residual * w;
                row += 1;
            }
        }
        if use_clock_chain {
            for k in 0..n_epochs.saturating_sub(1) {
                let tau = epochs[k + 1].0 - epochs[k].0;
                for (s, c) in slots[k].iter().enumerate() {
                    let i = c.index();
                    jac[(row, col_base[k + 1] + s)] = chain_w;
                    jac[(row, col_base[k] + s)] = -chain_w;
                    res[row] = (clocks_m[k + 1][i] - clocks_m[k][i] - drift_m * tau) * chain_w;
                    row += 1;
                }
            }
        }
        debug_assert_eq!(row, n_rows);
        let h = jac.transpose() * &jac;
        let g = jac.transpose() * &res;
        let step = h.cholesky().map(|c| c.solve(&(-g))).ok_or_else(|| {
            EstimatorError::RankDeficient { direction: "anchor refinement normal equations".into() }
        })?;

        // Halve overshooting steps so refinement can only descend.
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..20 {
            let cand_anchor = *anchor_pos + scale * Vector3::new(step[0], step[1], step[2]);
            let mut cand_clocks = clocks_m.clone();
            for (k, clk) in cand_clocks.iter_mut().enumerate() {
                for (s, c) in slots[k].iter().enumerate() {
                    clk[c.index()] += scale * step[col_base[k] + s];
                }
            }
            match eval_cost(&cand_anchor, &cand_clocks) {
                Some(new_cost) if new_cost <= cost + 1e-12 * cost.max(1.0) => {
                    accepted = Some((cand_anchor, cand_clocks, new_cost));
                    break;
                }
                _ => scale *= 0.5,
            }
        }
        let Some((a, c, new_cost)) = accepted else {
            return Err(EstimatorError::NonConvergence(*iterations));
        };
        *anchor_pos = a;
        *clocks_m = c;
        cost = new_cost;
        if (scale * step.norm()) < 1e-6 {
            return Ok(cost);
        }
    }
    Err(EstimatorError::NonConvergence(MAX_ITERATIONS))
}

/// Anchor refinement: optimizes the anchor ECEF position and per-epoch
/// clock biases against every pseudorange, with the VIO positions and the
/// calibrated (ψ, clock drift) held fixed. Clock-evolution factors tie the
/// per-epoch biases together unless `use_clock_chain` is false.
///
/// The anchor maps the local-world origin to ECEF; the coarse anchor (an
/// average location of the window) only seeds the solve and the correction
/// freezing. Corrections are re-frozen at the fitted per-epoch positions
/// until the anchor settles, since the Sagnac term alone moves millimeters
/// per meter of approximate-position error.
pub fn refine_anchor(
    win: &InitWindow,
    psi: f64,
    clock_drift: f64,
    coarse: &Vector3<f64>,
    use_clock_chain: bool,
) -> Result<RefinedAnchor, EstimatorError> {
    let used: Vec<(&EpochObservations, Vector3<f64>)> = win
        .epochs
        .iter()
        .filter_map(|e| win.interpolate(e.t - win.t0).map(|(p, _)| (e, p)))
        .collect();
    if used.is_empty() {
        return Err(EstimatorError::Gnss(SppError::InsufficientSatellites {
            found: 0,
            need: 4,
            constellations: 0,
        }));
    }
    let p_mean = used.iter().map(|(_, p)| p).sum::<Vector3<f64>>() / used.len() as f64;
    let drift_m = clock_drift * SPEED_OF_LIGHT;

    let mut anchor_pos = *coarse;
    let mut clocks_m = vec![Vector4::<f64>::zeros(); used.len()];
    let mut start_cost = None;
    let mut iterations = 0;
    let mut final_state = None;
    for round in 0..6 {
        // Approximate per-epoch ECEF for correction freezing: on the first
        // round the coarse anchor stands in for the window-average location;
        // afterwards the fitted origin anchor maps each VIO position.
        let frame = AnchorFrame::new(anchor_pos)?;
        let r_we = frame.r_en * yaw_rotation(psi);
        let mut epochs: Vec<(f64, Vector3<f64>, Vec<PreparedObservation>)> = Vec::new();
        for (epoch, p_w) in &used {
            let approx = if round == 0 {
                anchor_pos + r_we * (p_w - p_mean)
            } else {
                anchor_pos + r_we * p_w
            };
            let prepared =
                preprocess_epoch(epoch, &win.store, &approx, &win.iono, &win.preprocess);
            epochs.push((epoch.t, *p_w, prepared));
        }
        // Clock slots: with chain factors every window-active constellation
        // stays determined at every epoch; without them only the slots with
        // pseudoranges in that epoch are solvable.
        let mut active = [false; 4];
        for (_, _, obs) in &epochs {
            for o in obs {
                active[o.constellation.index()] = true;
            }
        }
        let slots: Vec<Vec<Constellation>> = epochs
            .iter()
            .map(|(_, _, obs)| {
                if use_clock_chain {
                    Constellation::ALL.into_iter().filter(|c| active[c.index()]).collect()
                } else {
                    let mut present = [false; 4];
                    for o in obs {
                        present[o.constellation.index()] = true;
                    }
                    Constellation::ALL.into_iter().filter(|c| present[c.index()]).collect()
                }
            })
            .collect();

        let before = anchor_pos;
        let cost = refine_solve(
            &epochs,
            &slots,
            psi,
            drift_m,
            use_clock_chain,
            &mut anchor_pos,
            &mut clocks_m,
            &mut start_cost,
            &mut iterations,
        )?;
        let clock_present: Vec<[bool; 4]> = slots
            .iter()
            .map(|s| {
                let mut p = [false; 4];
                for c in s {
                    p[c.index()] = true;
                }
                p
            })
            .collect();
        final_state = Some((cost, clock_present));
        if (anchor_pos - before).norm() < 1e-5 {
            break;
        }
    }
    let (cost, clock_present) = final_state.expect("at least one refinement round runs");
    let alignment = FrameAlignment::new(anchor_pos, psi)?;
    Ok(RefinedAnchor {
        alignment,
        epoch_times: used.iter().map(|(e, _)| e.t).collect(),
        clocks: clocks_m.iter().map(|c| c / SPEED_OF_LIGHT).collect(),
        clock_present,
        start_cost: start_cost.expect("set by the first inner solve"),
        cost,
        iterations,
    })
}

/// Machine-readable summary of one initialization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitReport {
    pub coarse_anchor_ecef: [f64; 3],
    pub coarse_cost: f64,
    pub coarse_pseudoranges: usize,
    pub yaw_offset: f64,
    pub clock_drift: f64,
    pub yaw_cost: f64,
    pub refined_anchor_ecef: [f64; 3],
    pub refine_cost: f64,
    pub epochs: usize,
    pub mean_satellites_per_epoch: f64,
}

/// Staged initialization with runtime ordering enforcement: yaw calibration
/// requires a coarse anchor, refinement requires a calibrated yaw.
pub struct InitSession<'a> {
    window: &'a InitWindow,
    pub min_epochs: usize,
    coarse: Option<CoarseAnchor>,
    yaw: Option<YawCalibration>,
    refined: Option<RefinedAnchor>,
}

impl<'a> InitSession<'a> {
    pub fn new(window: &'a InitWindow) -> Self {
        Self { window, min_epochs: MIN_INIT_EPOCHS, coarse: None, yaw: None, refined: None }
    }

    pub fn coarse_anchor(&mut self) -> Result<Vector3<f64>, EstimatorError> {
        if self.window.epochs.len() < self.min_epochs {
            return Err(EstimatorError::InsufficientEpochs {
                found: self.window.epochs.len(),
                need: self.min_epochs,
            });
        }
        let c = coarse_anchor(self.window)?;
        let pos = c.pos_ecef;
        self.coarse = Some(c);
        Ok(pos)
    }

    pub fn calibrate_yaw(&mut self) -> Result<YawCalibration, EstimatorError> {
        let Some(coarse) = &self.coarse else {
            return Err(EstimatorError::StageOrder("yaw calibration requires a coarse anchor"));
        };
        let y = calibrate_yaw(self.window, &coarse.pos_ecef)?;
        self.yaw = Some(y);
        Ok(y)
    }

    pub fn refine_anchor(&mut self) -> Result<&RefinedAnchor, EstimatorError> {
        let Some(coarse) = &self.coarse else {
            return Err(EstimatorError::StageOrder("anchor refinement requires a coarse anchor"));
        };
        let Some(yaw) = &self.yaw else {
            return Err(EstimatorError::StageOrder(
                "anchor refinement requires a calibrated yaw offset",
            ));
        };
        let r = refine_anchor(self.window, yaw.psi, yaw.clock_drift, &coarse.pos_ecef, true)?;
        self.refined = Some(r);
        Ok(self.refined.as_ref().expect("just set"))
    }

    /// Runs all three stages in order and summarizes them.
    pub fn run(&mut self) -> Result<InitReport, EstimatorError> {
        self.coarse_anchor()?;
        self.calibrate_yaw()?;
        self.refine_anchor()?;
        Ok(self.report().expect("all stages complete"))
    }

    pub fn refined(&self) -> Option<&RefinedAnchor> {
        self.refined.as_ref()
    }

    pub fn report(&self) -> Option<InitReport> {
        let (coarse, yaw, refined) = (self.coarse.as_ref()?, self.yaw.as_ref()?, self.refined.as_ref()?);
        let epochs = self.window.epochs.len();
        let total_obs: usize = self.window.epochs.iter().map(|e| e.observations.len()).sum();
        Some(InitReport {
            coarse_anchor_ecef: coarse.pos_ecef.into(),
            coarse_cost: coarse.cost,
            coarse_pseudoranges: coarse.used_pseudoranges,
            yaw_offset: yaw.psi,
            clock_drift: yaw.clock_drift,
            yaw_cost: yaw.cost,
            refined_anchor_ecef: refined.alignment.anchor_ecef.into(),
            refine_cost: refined.cost,
            epochs,
            mean_satellites_per_epoch: if epochs == 0 {
                0.0
            } else {
                total_obs as f64 / epochs as f64
            },
        })
    }
}
