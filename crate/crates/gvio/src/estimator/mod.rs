//! Tightly coupled sliding-window estimator: fuses preintegrated IMU,
//! inverse-depth visual, pseudorange, Doppler, and receiver-clock factors
//! over a fixed-size keyframe window with two-way marginalization, global
//! yaw-offset estimation, and degeneracy-aware switching.

pub mod factors;
pub mod init;
pub mod marginalization;
pub mod pipeline;
pub mod solver;
pub mod state;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("time {t:.3} outside window [{start:.3}, {end:.3}]")]
    OutOfWindow { t: f64, start: f64, end: f64 },
    #[error("clock factor interval is not positive: {0:.6} s")]
    NonPositiveInterval(f64),
    #[error("solver diverged: cost increased through {0} damping escalations")]
    SolverDiverged(usize),
    #[error("normal equations rank deficient along {direction}")]
    RankDeficient { direction: String },
    #[error("window holds {found} keyframes, need {need}")]
    WindowTooSmall { found: usize, need: usize },
    #[error("initialization window holds {found} GNSS epochs, need {need}")]
    InsufficientEpochs { found: usize, need: usize },
    #[error("insufficient excitation: accel variance {0:.4} below threshold")]
    InsufficientExcitation(f64),
    #[error("motion too slow for yaw calibration: {speed:.3} m/s < {threshold:.3} m/s")]
    DegenerateMotion { speed: f64, threshold: f64 },
    #[error("initialization stage order violated: {0}")]
    StageOrder(&'static str),
    #[error("gnss solve failed: {0}")]
    Gnss(#[from] crate::spp::SppError),
    #[error("frame alignment failed: {0}")]
    Frame(#[from] crate::frames::FrameError),
    #[error("imu preintegration failed: {0}")]
    Imu(#[from] crate::inertial::ImuError),
    #[error("nonlinear solve did not converge after {0} iterations")]
    NonConvergence(usize),
}
