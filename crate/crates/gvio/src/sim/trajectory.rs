//! Smooth desk-scale reference trajectory: a three-axis Lissajous figure
//! with closed-form derivatives, heading locked to the horizontal velocity
//! direction, and feasibility checks against speed and acceleration caps.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::inertial::{ImuSample, MotionState};
use crate::sim::SimError;

/// Lissajous trajectory parameters. Each axis follows
/// amplitude * sin(harmonic * base_rate * t + phase) around the center,
/// with base_rate = 2 pi / period.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub center: Vector3<f64>,
    pub amplitudes: Vector3<f64>,
    pub harmonics: [u32; 3],
    pub period: f64,
    pub phases: Vector3<f64>,
    /// Feasibility caps checked at construction.
    pub max_speed: f64,
    pub max_accel: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        // Fits a 30 m cube with ~4.5 m/s peak speed; the x phase keeps the
        // horizontal velocity away from zero so the heading stays defined.
        Self {
            center: Vector3::zeros(),
            amplitudes: Vector3::new(12.0, 12.0, 5.0),
            harmonics: [2, 3, 1],
            period: 60.0,
            phases: Vector3::new(std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_3, 0.0),
            max_speed: 10.0,
            max_accel: 6.0,
        }
    }
}

impl TrajectoryConfig {
    /// Same shape shrunk by `scale`, for low-excitation scenarios.
    pub fn scaled(mut self, scale: f64) -> Self {
        self.amplitudes *= scale;
        self
    }
}

/// Kinematic state of the reference trajectory at one instant.
#[derive(Debug, Clone)]
pub struct TrajectorySample {
    pub t: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    pub yaw: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    config: TrajectoryConfig,
}

impl Trajectory {
    /// Validates feasibility (speed/acceleration caps, nonvanishing
    /// horizontal speed) by dense sampling over one period.
    pub fn new(config: TrajectoryConfig) -> Result<Self, SimError> {
        let traj = Self { config };
        let n = 6000;
        let mut max_speed: f64 = 0.0;
        let mut max_accel: f64 = 0.0;
        let mut min_horizontal: f64 = f64::INFINITY;
        for i in 0..n {
            let s = traj.sample(i as f64 * traj.config.period / n as f64);
            max_speed = max_speed.max(s.v.norm());
            max_accel = max_accel.max(s.a.norm());
            min_horizontal = min_horizontal.min(s.v.xy().norm());
        }
        if max_speed > traj.config.max_speed {
            return Err(SimError::InfeasibleCaps {
                what: "speed",
                value: max_speed,
                cap: traj.config.max_speed,
            });
        }
        if max_accel > traj.config.max_accel {
            return Err(SimError::InfeasibleCaps {
                what: "acceleration",
                value: max_accel,
                cap: traj.config.max_accel,
            });
        }
        if min_horizontal < 0.05 {
            return Err(SimError::DegenerateHeading { min_horizontal_speed: min_horizontal });
        }
        Ok(traj)
    }

    pub fn config(&self) -> &TrajectoryConfig {
        &self.config
    }

    pub fn sample(&self, t: f64) -> TrajectorySample {
        let c = &self.config;
        let base = 2.0 * std::f64::consts::PI / c.period;
        let mut p = c.center;
        let mut v = Vector3::zeros();
        let mut a = Vector3::zeros();
        let mut jerk = Vector3::zeros();
        for axis in 0..3 {
            let w = c.harmonics[axis] as f64 * base;
            let arg = w * t + c.phases[axis];
            let (s, cos) = arg.sin_cos();
            p[axis] += c.amplitudes[axis] * s;
            v[axis] = c.amplitudes[axis] * w * cos;
            a[axis] = -c.amplitudes[axis] * w * w * s;
            jerk[axis] = -c.amplitudes[axis] * w * w * w * cos;
        }
        let h2 = v.x * v.x + v.y * v.y;
        let yaw = v.y.atan2(v.x);
        let yaw_rate = (v.x * a.y - v.y * a.x) / h2;
        TrajectorySample { t, p, v, a, yaw, yaw_rate }
    }

    /// Body attitude: heading follows the horizontal velocity, zero
    /// pitch/roll.
    pub fn attitude(&self, t: f64) -> UnitQuaternion<f64> {
        UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, self.sample(t).yaw))
    }

    pub fn state(&self, t: f64) -> MotionState {
        let s = self.sample(t);
        MotionState {
            p: s.p,
            q: self.attitude(t),
            v: s.v,
            ba: Vector3::zeros(),
            bw: Vector3::zeros(),
        }
    }

    /// Noiseless, bias-free IMU reading: specific force and body rate.
    pub fn imu_sample(&self, t: f64, gravity: &Vector3<f64>) -> ImuSample {
        let s = self.sample(t);
        let q = self.attitude(t);
        ImuSample {
            t,
            accel: q.inverse() * (s.a + gravity),
            gyro: Vector3::new(0.0, 0.0, s.yaw_rate),
        }
    }

    /// Average speed over [t0, t1], sampled at `n` points.
    pub fn mean_speed(&self, t0: f64, t1: f64, n: usize) -> f64 {
        let n = n.max(2);
        (0..n)
            .map(|i| self.sample(t0 + (t1 - t0) * i as f64 / (n - 1) as f64).v.norm())
            .sum::<f64>()
            / n as f64
    }
}
