//! Window state containers and the error-state layout shared by the solver,
//! the factors, and marginalization.
//!
//! Each keyframe carries a 20-dof error state: position (3), attitude (3),
//! velocity (3), accel bias (3), gyro bias (3), receiver clock bias per
//! constellation (4), and clock drift (1). Clock states are held in meters
//! (c times seconds) so their Jacobian columns are commensurate with the
//! geometric ones; conversion to seconds happens at the interfaces.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3, Vector4};

use crate::estimator::EstimatorError;
use crate::inertial::MotionState;
use crate::math::{quat_boxplus, small_quat};

pub use crate::inertial::{ERR_BA, ERR_BW, ERR_P, ERR_THETA, ERR_V};

/// First column of the 4-vector clock bias block (m).
pub const ERR_CLK: usize = 15;
/// Column of the scalar clock drift (m/s).
pub const ERR_DRIFT: usize = 19;
/// Error-state dimension of one keyframe.
pub const KF_ERR_DIM: usize = 20;

/// One keyframe's full state. `id` is persistent across window slides.
#[derive(Debug, Clone)]
pub struct KeyframeState {
    pub id: u64,
    /// Relative time (s).
    pub t: f64,
    pub motion: MotionState,
    /// Receiver clock bias per constellation slot, meters (c * seconds).
    pub clock_m: Vector4<f64>,
    /// Receiver clock drift, m/s (c * s/s).
    pub drift_m: f64,
}

impl KeyframeState {
    /// Applies a 20-dof error-state update; attitude is updated on-manifold
    /// with a right-multiplicative retraction.
    pub fn boxplus(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), KF_ERR_DIM);
        let d = |i: usize| Vector3::new(delta[i], delta[i + 1], delta[i + 2]);
        self.motion.p += d(ERR_P);
        self.motion.q = quat_boxplus(&self.motion.q, &d(ERR_THETA));
        self.motion.v += d(ERR_V);
        self.motion.ba += d(ERR_BA);
        self.motion.bw += d(ERR_BW);
        for i in 0..4 {
            self.clock_m[i] += delta[ERR_CLK + i];
        }
        self.drift_m += delta[ERR_DRIFT];
    }
}

/// One feature observation inside the window: raw pixel plus the z = 1
/// unprojected ray in the camera frame.
#[derive(Debug, Clone, Copy)]
pub struct FeatureObs {
    pub pixel: Vector2<f64>,
    pub ray: Vector3<f64>,
}

/// A tracked feature: host keyframe, optional inverse depth (set once
/// triangulated), and all window observations keyed by keyframe id.
#[derive(Debug, Clone)]
pub struct FeatureTrack {
    pub id: u64,
    /// Keyframe id owning the inverse-depth parameterization.
    pub host: u64,
    /// Inverse depth in the host camera frame (1/m); None until triangulated.
    pub rho: Option<f64>,
    pub obs: BTreeMap<u64, FeatureObs>,
}

/// Fixed ENU frame at the estimated anchor. The yaw offset stays a separate
/// estimated state; this struct freezes only the ECEF anchor and its ENU
/// rotation.
#[derive(Debug, Clone)]
pub struct AnchorFrame {
    pub anchor_ecef: Vector3<f64>,
    /// ENU-to-ECEF rotation at the anchor.
    pub r_en: Matrix3<f64>,
}

impl AnchorFrame {
    pub fn new(anchor_ecef: Vector3<f64>) -> Result<Self, crate::frames::FrameError> {
        let geo = crate::frames::ecef_to_geodetic(&anchor_ecef)?;
        Ok(Self { anchor_ecef, r_en: crate::frames::enu_rotation(geo.lat, geo.lon) })
    }
}

/// The sliding window: keyframes in time order, tracked features, the global
/// yaw offset, and the anchor once GNSS initialization has run.
#[derive(Debug, Clone, Default)]
pub struct WindowState {
    pub keyframes: Vec<KeyframeState>,
    pub features: BTreeMap<u64, FeatureTrack>,
    /// Yaw offset between the local world frame and ENU (rad).
    pub yaw_offset: f64,
    pub anchor: Option<AnchorFrame>,
}

impl WindowState {
    pub fn slot_of(&self, kf_id: u64) -> Option<usize> {
        self.keyframes.iter().position(|k| k.id == kf_id)
    }

    /// Mean speed over the window (m/s).
    pub fn avg_speed(&self) -> f64 {
        if self.keyframes.is_empty() {
            return 0.0;
        }
        self.keyframes.iter().map(|k| k.motion.v.norm()).sum::<f64>() / self.keyframes.len() as f64
    }

    pub fn start_time(&self) -> Option<f64> {
        self.keyframes.first().map(|k| k.t)
    }

    pub fn end_time(&self) -> Option<f64> {
        self.keyframes.last().map(|k| k.t)
    }
}

/// Degeneracy switches, refreshed every frame before optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegeneracyStatus {
    /// True when the average window speed is below the threshold; the yaw
    /// offset is then excluded from the solve and stays bit-identical.
    pub yaw_locked: bool,
    /// False while no usable GNSS epoch is attached to the window.
    pub gnss_available: bool,
    /// Usable satellites at the most recent epoch.
    pub num_sats_current: usize,
    pub avg_window_speed: f64,
}

/// Computes the switches from the current window. `v_ths` is the speed
/// threshold below which yaw becomes unobservable.
pub fn update_degeneracy(
    window: &WindowState,
    num_sats_current: usize,
    gnss_available: bool,
    v_ths: f64,
) -> DegeneracyStatus {
    let avg = window.avg_speed();
    DegeneracyStatus {
        yaw_locked: avg < v_ths,
        gnss_available,
        num_sats_current,
        avg_window_speed: avg,
    }
}

/// State at an arbitrary time inside the window: linear interpolation for
/// position, velocity, and clock states; spherical for attitude. GNSS factors
/// touching this time split their Jacobians over the bracketing keyframes
/// with weights `1 - w` and `w`.
#[derive(Debug, Clone)]
pub struct InterpolatedState {
    pub k0: usize,
    pub k1: usize,
    /// Blend weight of keyframe `k1` in [0, 1]; 0 when `t` hits a keyframe.
    pub w: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub clock_m: Vector4<f64>,
    pub drift_m: f64,
}

/// Matching tolerance for "epoch coincides with a keyframe" (s).
const TIME_EPS: f64 = 1e-6;

pub fn interpolate_state_at(
    window: &WindowState,
    t: f64,
) -> Result<InterpolatedState, EstimatorError> {
    let (Some(start), Some(end)) = (window.start_time(), window.end_time()) else {
        return Err(EstimatorError::OutOfWindow { t, start: f64::NAN, end: f64::NAN });
    };
    if t < start - TIME_EPS || t > end + TIME_EPS {
        return Err(EstimatorError::OutOfWindow { t, start, end });
    }
    // Exact keyframe hit first, including single-keyframe windows.
    if let Some(k) = window.keyframes.iter().position(|k| (k.t - t).abs() <= TIME_EPS) {
        let kf = &window.keyframes[k];
        return Ok(InterpolatedState {
            k0: k,
            k1: k,
            w: 0.0,
            p: kf.motion.p,
            v: kf.motion.v,
            q: kf.motion.q,
            clock_m: kf.clock_m,
            drift_m: kf.drift_m,
        });
    }
    let k1 = window
        .keyframes
        .iter()
        .position(|k| k.t > t)
        .ok_or(EstimatorError::OutOfWindow { t, start, end })?;
    if k1 == 0 {
        return Err(EstimatorError::OutOfWindow { t, start, end });
    }
    let k0 = k1 - 1;
    let a = &window.keyframes[k0];
    let b = &window.keyframes[k1];
    let w = (t - a.t) / (b.t - a.t);
    let q = a.motion.q.slerp(&b.motion.q, w);
    Ok(InterpolatedState {
        k0,
        k1,
        w,
        p: (1.0 - w) * a.motion.p + w * b.motion.p,
        v: (1.0 - w) * a.motion.v + w * b.motion.v,
        q,
        clock_m: (1.0 - w) * a.clock_m + w * b.clock_m,
        drift_m: (1.0 - w) * a.drift_m + w * b.drift_m,
    })
}

/// Convenience constructor for tests and bootstrap code.
pub fn keyframe(id: u64, t: f64, motion: MotionState) -> KeyframeState {
    KeyframeState { id, t, motion, clock_m: Vector4::zeros(), drift_m: 0.0 }
}

/// Applies a small local attitude perturbation, used by bootstrap noise.
pub fn perturb_attitude(q: &UnitQuaternion<f64>, theta: &Vector3<f64>) -> UnitQuaternion<f64> {
    q * small_quat(theta)
}
