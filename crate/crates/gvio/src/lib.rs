//! Tightly coupled GNSS-visual-inertial state estimation.
//!
//! The crate fuses raw GNSS measurements (pseudorange and Doppler), IMU
//! readings, and monocular feature tracks in a single sliding-window factor
//! graph. Local odometry states live in a gravity-aligned world frame; a
//! four-parameter alignment (ECEF anchor plus yaw offset) ties that frame to
//! the Earth, so the estimator outputs drift-free global poses while keeping
//! the smoothness of visual-inertial odometry.
//!
//! Main pieces:
//!
//! * [`frames`]: ECEF / geodetic / ENU / local-world conversions.
//! * [`gnss`]: broadcast ephemeris evaluation, atmospheric models,
//!   measurement prediction, and epoch preprocessing.
//! * [`spp`]: standalone single point positioning and velocity solutions.
//! * [`inertial`]: IMU preintegration with bias Jacobians.
//! * [`vision`]: pinhole camera model and inverse-depth reprojection.
//! * [`estimator`]: the sliding-window solver, its factors, initialization,
//!   marginalization, and degeneracy handling.
//! * [`sim`]: a deterministic measurement simulator for desk-scale scenarios.
//! * [`eval`]: trajectory alignment and ATE/RPE metrics.
//! * [`io`]: dataset and result file formats, including a RINEX nav reader.
//!
//! The `examples/` directory shows one end-to-end program per capability;
//! the `gvio` binary exposes the same flows as subcommands.

pub mod constants;
pub mod estimator;
pub mod eval;
pub mod frames;
pub mod gnss;
pub mod inertial;
pub mod io;
pub mod math;
pub mod sim;
pub mod spp;
pub mod vision;
