//! Measurement simulation: a smooth desk-scale trajectory, a synthetic
//! multi-constellation sky, and forward models that generate IMU, feature,
//! and GNSS streams with configurable noise and scenario edits.

pub mod constellation;
pub mod forward;
pub mod scenario;
pub mod synth;
pub mod trajectory;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("trajectory {what} {value:.3} exceeds cap {cap:.3}")]
    InfeasibleCaps { what: &'static str, value: f64, cap: f64 },
    #[error("horizontal speed reaches {min_horizontal_speed:.3e} m/s; heading undefined")]
    DegenerateHeading { min_horizontal_speed: f64 },
    #[error("landmark calibration failed: {0}")]
    LandmarkCalibration(String),
}
