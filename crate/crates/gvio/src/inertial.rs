//! IMU preintegration: midpoint integration of relative position, velocity,
//! and rotation between keyframes, with first-order bias correction, noise
//! covariance propagation, and the analytic residual Jacobians used by the
//! sliding-window estimator.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::GRAVITY_MAGNITUDE;
use crate::math::{quat_left, quat_right, skew, small_quat};

#[derive(Debug, Error)]
pub enum ImuError {
    #[error("preintegration needs at least two samples, got {0}")]
    EmptyInterval(usize),
    #[error("IMU timestamps not strictly increasing at index {index}")]
    NonMonotonicTimestamps { index: usize },
    #[error("preintegration covariance is not positive definite")]
    SingularCovariance,
}

/// One accelerometer and gyroscope reading.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force in the body frame (m/s^2).
    pub accel: Vector3<f64>,
    /// Angular rate in the body frame (rad/s).
    pub gyro: Vector3<f64>,
}

/// Continuous-time IMU noise densities and the gravity vector they pair
/// with. Per-sample standard deviations at rate 1/dt are density/sqrt(dt).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImuNoiseParams {
    /// Accelerometer white noise density (m/s^2/sqrt(Hz)).
    pub accel_noise_density: f64,
    /// Gyroscope white noise density (rad/s/sqrt(Hz)).
    pub gyro_noise_density: f64,
    /// Accelerometer bias random-walk density (m/s^3/sqrt(Hz)).
    pub accel_bias_walk: f64,
    /// Gyroscope bias random-walk density (rad/s^2/sqrt(Hz)).
    pub gyro_bias_walk: f64,
    /// Gravity in the world frame. With a z-up world this points up with
    /// magnitude g, matching a level accelerometer at rest reading +g on z.
    pub gravity: Vector3<f64>,
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        // Densities chosen so a 200 Hz stream has 0.05 m/s^2 and
        // 0.005 rad/s per-sample standard deviations.
        Self {
            accel_noise_density: 0.05 / 200.0_f64.sqrt(),
            gyro_noise_density: 0.005 / 200.0_f64.sqrt(),
            accel_bias_walk: 3.5e-4,
            gyro_bias_walk: 3.5e-5,
            gravity: Vector3::new(0.0, 0.0, GRAVITY_MAGNITUDE),
        }
    }
}

impl ImuNoiseParams {
    pub fn per_sample_accel_sigma(&self, dt: f64) -> f64 {
        self.accel_noise_density / dt.sqrt()
    }

    pub fn per_sample_gyro_sigma(&self, dt: f64) -> f64 {
        self.gyro_noise_density / dt.sqrt()
    }
}

/// Pose, velocity, and IMU biases of one keyframe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionState {
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub v: Vector3<f64>,
    pub ba: Vector3<f64>,
    pub bw: Vector3<f64>,
}

/// Index of the position error block within a motion error vector. The
/// motion error layout is [dp, dtheta, dv, dba, dbw], 15 dimensions.
pub const ERR_P: usize = 0;
pub const ERR_THETA: usize = 3;
pub const ERR_V: usize = 6;
pub const ERR_BA: usize = 9;
pub const ERR_BW: usize = 12;
pub const MOTION_ERROR_DIM: usize = 15;

// Rows of the preintegration error/residual vector [alpha, beta, theta,
// ba, bw], which is also the residual stacking order.
const ROW_A: usize = 0;
const ROW_B: usize = 3;
const ROW_TH: usize = 6;
const ROW_BA: usize = 9;
const ROW_BW: usize = 12;

/// Preintegrated IMU measurement over one keyframe interval.
#[derive(Debug, Clone)]
pub struct PreintegratedImu {
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub gamma: UnitQuaternion<f64>,
    /// Covariance of the 15-dim error [alpha, beta, theta, ba, bw].
    pub covariance: SMatrix<f64, 15, 15>,
    /// Accumulated error-state transition; its bias columns are the
    /// first-order sensitivities used for bias correction.
    jacobian: SMatrix<f64, 15, 15>,
    pub ba0: Vector3<f64>,
    pub bw0: Vector3<f64>,
    noise: ImuNoiseParams,
    samples: Vec<ImuSample>,
    t_start: f64,
    t_end: f64,
}

impl PreintegratedImu {
    /// Integrates samples (at least two, strictly increasing timestamps)
    /// with the given linearization biases.
    pub fn integrate(
        samples: &[ImuSample],
        noise: &ImuNoiseParams,
        ba0: Vector3<f64>,
        bw0: Vector3<f64>,
    ) -> Result<Self, ImuError> {
        if samples.len() < 2 {
            return Err(ImuError::EmptyInterval(samples.len()));
        }
        for (i, pair) in samples.windows(2).enumerate() {
            if pair[1].t <= pair[0].t {
                return Err(ImuError::NonMonotonicTimestamps { index: i + 1 });
            }
        }
        let mut pre = Self {
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            gamma: UnitQuaternion::identity(),
            covariance: SMatrix::zeros(),
            jacobian: SMatrix::identity(),
            ba0,
            bw0,
            noise: noise.clone(),
            samples: samples.to_vec(),
            t_start: samples[0].t,
            t_end: samples[samples.len() - 1].t,
        };
        pre.propagate();
        Ok(pre)
    }

    /// Re-integrates the stored samples around new linearization biases,
    /// used when the estimate drifts too far for first-order correction.
    pub fn re_preintegrate(&mut self, ba0: Vector3<f64>, bw0: Vector3<f64>) {
        self.ba0 = ba0;
        self.bw0 = bw0;
        self.propagate();
    }

    pub fn dt(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.noise.gravity
    }

    /// True when the current bias estimate has moved far enough from the
    /// linearization point that re-preintegration is warranted.
    pub fn bias_deviates(&self, ba: &Vector3<f64>, bw: &Vector3<f64>, threshold: f64) -> bool {
        (ba - self.ba0).norm() > threshold || (bw - self.bw0).norm() > threshold
    }

    /// First-order bias-corrected measurements at the given bias estimate.
    pub fn corrected(
        &self,
        ba: &Vector3<f64>,
        bw: &Vector3<f64>,
    ) -> (Vector3<f64>, Vector3<f64>, UnitQuaternion<f64>) {
        let dba = ba - self.ba0;
        let dbw = bw - self.bw0;
        let j = &self.jacobian;
        let alpha = self.alpha
            + j.fixed_view::<3, 3>(ROW_A, ROW_BA) * dba
            + j.fixed_view::<3, 3>(ROW_A, ROW_BW) * dbw;
        let beta = self.beta
            + j.fixed_view::<3, 3>(ROW_B, ROW_BA) * dba
            + j.fixed_view::<3, 3>(ROW_B, ROW_BW) * dbw;
        let gamma = self.gamma * small_quat(&(self.jacobian.fixed_view::<3, 3>(ROW_TH, ROW_BW) * dbw));
        (alpha, beta, gamma)
    }

    /// Inverse Cholesky factor L^-1 of the covariance, so that whitened
    /// residuals are L^-1 r.
    pub fn sqrt_information(&self) -> Result<SMatrix<f64, 15, 15>, ImuError> {
        let chol = self.covariance.cholesky().ok_or(ImuError::SingularCovariance)?;
        chol.l()
            .solve_lower_triangular(&SMatrix::<f64, 15, 15>::identity())
            .ok_or(ImuError::SingularCovariance)
    }

    fn propagate(&mut self) {
        self.alpha = Vector3::zeros();
        self.beta = Vector3::zeros();
        self.gamma = UnitQuaternion::identity();
        self.covariance = SMatrix::zeros();
        self.jacobian = SMatrix::identity();
        let eye = Matrix3::identity();
        for i in 0..self.samples.len() - 1 {
            let (s0, s1) = (self.samples[i], self.samples[i + 1]);
            let dt = s1.t - s0.t;
            let w_mid = 0.5 * (s0.gyro + s1.gyro) - self.bw0;
            let r0 = self.gamma.to_rotation_matrix().into_inner();
            let gamma1 = self.gamma * UnitQuaternion::from_scaled_axis(w_mid * dt);
            let r1 = gamma1.to_rotation_matrix().into_inner();
            let a0 = s0.accel - self.ba0;
            let a1 = s1.accel - self.ba0;
            let a_mid = 0.5 * (r0 * a0 + r1 * a1);

            self.alpha += self.beta * dt + 0.5 * a_mid * dt * dt;
            self.beta += a_mid * dt;
            self.gamma = gamma1;

            let x = r0 * skew(&a0);
            let z = r1 * skew(&a1);
            let y = z * (eye - dt * skew(&w_mid));

            let mut f = SMatrix::<f64, 15, 15>::identity();
            f.fixed_view_mut::<3, 3>(ROW_A, ROW_B).copy_from(&(eye * dt));
            f.fixed_view_mut::<3, 3>(ROW_A, ROW_TH).copy_from(&(-0.25 * dt * dt * (x + y)));
            f.fixed_view_mut::<3, 3>(ROW_A, ROW_BA).copy_from(&(-0.25 * dt * dt * (r0 + r1)));
            f.fixed_view_mut::<3, 3>(ROW_A, ROW_BW).copy_from(&(0.25 * dt * dt * dt * z));
            f.fixed_view_mut::<3, 3>(ROW_B, ROW_TH).copy_from(&(-0.5 * dt * (x + y)));
            f.fixed_view_mut::<3, 3>(ROW_B, ROW_BA).copy_from(&(-0.5 * dt * (r0 + r1)));
            f.fixed_view_mut::<3, 3>(ROW_B, ROW_BW).copy_from(&(0.5 * dt * dt * z));
            f.fixed_view_mut::<3, 3>(ROW_TH, ROW_TH).copy_from(&(eye - dt * skew(&w_mid)));
            f.fixed_view_mut::<3, 3>(ROW_TH, ROW_BW).copy_from(&(-dt * eye));

            // Noise vector [na0, nw0, na1, nw1, nba, nbw].
            let mut v = SMatrix::<f64, 15, 18>::zeros();
            v.fixed_view_mut::<3, 3>(ROW_A, 0).copy_from(&(0.25 * dt * dt * r0));
            v.fixed_view_mut::<3, 3>(ROW_A, 3).copy_from(&(-0.125 * dt * dt * dt * z));
            v.fixed_view_mut::<3, 3>(ROW_A, 6).copy_from(&(0.25 * dt * dt * r1));
            v.fixed_view_mut::<3, 3>(ROW_A, 9).copy_from(&(-0.125 * dt * dt * dt * z));
            v.fixed_view_mut::<3, 3>(ROW_B, 0).copy_from(&(0.5 * dt * r0));
            v.fixed_view_mut::<3, 3>(ROW_B, 3).copy_from(&(-0.25 * dt * dt * z));
            v.fixed_view_mut::<3, 3>(ROW_B, 6).copy_from(&(0.5 * dt * r1));
            v.fixed_view_mut::<3, 3>(ROW_B, 9).copy_from(&(-0.25 * dt * dt * z));
            v.fixed_view_mut::<3, 3>(ROW_TH, 3).copy_from(&(0.5 * dt * eye));
            v.fixed_view_mut::<3, 3>(ROW_TH, 9).copy_from(&(0.5 * dt * eye));
            v.fixed_view_mut::<3, 3>(ROW_BA, 12).copy_from(&(dt * eye));
            v.fixed_view_mut::<3, 3>(ROW_BW, 15).copy_from(&(dt * eye));

            // Sample-noise variances are doubled because each interior
            // sample is shared by two adjacent midpoint steps; this keeps
            // the accumulated covariance equal to density^2 * T.
            let sa = 2.0 * self.noise.accel_noise_density.powi(2) / dt;
            let sw = 2.0 * self.noise.gyro_noise_density.powi(2) / dt;
            let wa = self.noise.accel_bias_walk.powi(2) / dt;
            let ww = self.noise.gyro_bias_walk.powi(2) / dt;
            let mut q = SMatrix::<f64, 18, 18>::zeros();
            for a in 0..3 {
                q[(a, a)] = sa;
                q[(3 + a, 3 + a)] = sw;
                q[(6 + a, 6 + a)] = sa;
                q[(9 + a, 9 + a)] = sw;
                q[(12 + a, 12 + a)] = wa;
                q[(15 + a, 15 + a)] = ww;
            }

            self.covariance = f * self.covariance * f.transpose() + v * q * v.transpose();
            self.jacobian = f * self.jacobian;
        }
    }
}

/// Residual and Jacobians of one preintegrated IMU factor.
#[derive(Debug, Clone)]
pub struct ImuFactorEval {
    pub residual: SVector<f64, 15>,
    /// Jacobian with respect to keyframe k motion error [dp, dtheta, dv,
    /// dba, dbw].
    pub jacobian_k: SMatrix<f64, 15, 15>,
    /// Jacobian with respect to keyframe k+1 motion error.
    pub jacobian_k1: SMatrix<f64, 15, 15>,
}

/// Evaluates the preintegration residual between keyframes k and k+1.
pub fn imu_residual(
    pre: &PreintegratedImu,
    k: &MotionState,
    k1: &MotionState,
) -> ImuFactorEval {
    let dt = pre.dt();
    let g = pre.gravity();
    let (alpha_c, beta_c, gamma_c) = pre.corrected(&k.ba, &k.bw);
    let r_wk = k.q.to_rotation_matrix().into_inner().transpose();

    let u = k1.p - k.p + 0.5 * g * dt * dt - k.v * dt;
    let w = k1.v + g * dt - k.v;
    let a = k.q.inverse() * k1.q;
    let err_q = a * gamma_c.inverse();

    let mut residual = SVector::<f64, 15>::zeros();
    residual.fixed_rows_mut::<3>(ROW_A).copy_from(&(r_wk * u - alpha_c));
    residual.fixed_rows_mut::<3>(ROW_B).copy_from(&(r_wk * w - beta_c));
    residual.fixed_rows_mut::<3>(ROW_TH).copy_from(&(2.0 * err_q.into_inner().imag()));
    residual.fixed_rows_mut::<3>(ROW_BA).copy_from(&(k1.ba - k.ba));
    residual.fixed_rows_mut::<3>(ROW_BW).copy_from(&(k1.bw - k.bw));

    let j = &pre.jacobian;
    let j_alpha_ba = j.fixed_view::<3, 3>(ROW_A, ROW_BA);
    let j_alpha_bw = j.fixed_view::<3, 3>(ROW_A, ROW_BW);
    let j_beta_ba = j.fixed_view::<3, 3>(ROW_B, ROW_BA);
    let j_beta_bw = j.fixed_view::<3, 3>(ROW_B, ROW_BW);
    let j_gamma_bw = j.fixed_view::<3, 3>(ROW_TH, ROW_BW).into_owned();

    let mut jk = SMatrix::<f64, 15, 15>::zeros();
    let mut jk1 = SMatrix::<f64, 15, 15>::zeros();

    jk.fixed_view_mut::<3, 3>(ROW_A, ERR_P).copy_from(&(-r_wk));
    jk.fixed_view_mut::<3, 3>(ROW_A, ERR_THETA).copy_from(&skew(&(r_wk * u)));
    jk.fixed_view_mut::<3, 3>(ROW_A, ERR_V).copy_from(&(-dt * r_wk));
    jk.fixed_view_mut::<3, 3>(ROW_A, ERR_BA).copy_from(&(-j_alpha_ba));
    jk.fixed_view_mut::<3, 3>(ROW_A, ERR_BW).copy_from(&(-j_alpha_bw));
    jk1.fixed_view_mut::<3, 3>(ROW_A, ERR_P).copy_from(&r_wk);

    jk.fixed_view_mut::<3, 3>(ROW_B, ERR_THETA).copy_from(&skew(&(r_wk * w)));
    jk.fixed_view_mut::<3, 3>(ROW_B, ERR_V).copy_from(&(-r_wk));
    jk.fixed_view_mut::<3, 3>(ROW_B, ERR_BA).copy_from(&(-j_beta_ba));
    jk.fixed_view_mut::<3, 3>(ROW_B, ERR_BW).copy_from(&(-j_beta_bw));
    jk1.fixed_view_mut::<3, 3>(ROW_B, ERR_V).copy_from(&r_wk);

    // Rotation rows from the quaternion product matrices of the residual
    // 2 vec(a * gamma_c^-1) with right-multiplicative attitude errors.
    let ql_a = quat_left(a.quaternion());
    let qr_gc = quat_right(gamma_c.inverse().quaternion());
    let qr_err = quat_right(err_q.quaternion());
    let qr_gamma = quat_right(pre.gamma.inverse().quaternion());
    jk.fixed_view_mut::<3, 3>(ROW_TH, ERR_THETA)
        .copy_from(&(-qr_err.fixed_view::<3, 3>(1, 1)).into_owned());
    jk1.fixed_view_mut::<3, 3>(ROW_TH, ERR_THETA)
        .copy_from(&(ql_a * qr_gc).fixed_view::<3, 3>(1, 1).into_owned());
    jk.fixed_view_mut::<3, 3>(ROW_TH, ERR_BW)
        .copy_from(&(-((ql_a * qr_gamma).fixed_view::<3, 3>(1, 1) * j_gamma_bw)));

    jk.fixed_view_mut::<3, 3>(ROW_BA, ERR_BA).copy_from(&(-Matrix3::identity()));
    jk1.fixed_view_mut::<3, 3>(ROW_BA, ERR_BA).copy_from(&Matrix3::identity());
    jk.fixed_view_mut::<3, 3>(ROW_BW, ERR_BW).copy_from(&(-Matrix3::identity()));
    jk1.fixed_view_mut::<3, 3>(ROW_BW, ERR_BW).copy_from(&Matrix3::identity());

    ImuFactorEval { residual, jacobian_k: jk, jacobian_k1: jk1 }
}
