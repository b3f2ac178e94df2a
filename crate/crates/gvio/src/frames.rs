//! Coordinate frames and conversions.
//!
//! Four frames matter here:
//!
//! * ECEF, the Earth-centered Earth-fixed frame GNSS satellites are given in;
//! * geodetic latitude/longitude/height on the WGS-84 ellipsoid;
//! * ENU, a local east-north-up tangent frame at an anchor point;
//! * the local world frame of the odometry, gravity-aligned with arbitrary
//!   yaw and origin.
//!
//! [`FrameAlignment`] carries the anchor position and the yaw offset between
//! local world and ENU, which together pin the odometry frame to the Earth.
//! Angles are radians throughout; degrees appear only at I/O boundaries.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{EARTH_ROTATION_RATE, SPEED_OF_LIGHT, WGS84_A, WGS84_B, WGS84_E2};
use crate::math::{yaw_rotation, yaw_rotation_deriv};

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    /// ECEF input so close to the geocenter that geodetic coordinates are
    /// meaningless.
    #[error("point within {0} m of the geocenter has no geodetic representation")]
    NearSingularOrigin(f64),
    /// Two points expected to be distinct coincide (zero baseline).
    #[error("coincident points leave the direction undefined")]
    CoincidentPoints,
}

/// Geodetic coordinates on the WGS-84 ellipsoid, radians and meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geodetic {
    pub lat: f64,
    pub lon: f64,
    pub height: f64,
}

/// Converts geodetic coordinates to ECEF.
pub fn geodetic_to_ecef(g: &Geodetic) -> Vector3<f64> {
    let (sin_lat, cos_lat) = g.lat.sin_cos();
    let (sin_lon, cos_lon) = g.lon.sin_cos();
    let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    Vector3::new(
        (n + g.height) * cos_lat * cos_lon,
        (n + g.height) * cos_lat * sin_lon,
        (n * (1.0 - WGS84_E2) + g.height) * sin_lat,
    )
}

/// Converts ECEF coordinates to geodetic via Bowring's method.
///
/// Eight fixed iterations bring the round-trip error below a micrometer for
/// any point from near the geocenter out to GNSS orbit altitudes; high
/// latitudes converge slowest.
pub fn ecef_to_geodetic(ecef: &Vector3<f64>) -> Result<Geodetic, FrameError> {
    if ecef.norm() < 1e-3 {
        return Err(FrameError::NearSingularOrigin(1e-3));
    }
    let p = ecef.xy().norm();
    let lon = ecef.y.atan2(ecef.x);
    // Second eccentricity squared.
    let ep2 = (WGS84_A * WGS84_A - WGS84_B * WGS84_B) / (WGS84_B * WGS84_B);
    let mut beta = (ecef.z * WGS84_A).atan2(p * WGS84_B);
    let mut lat = 0.0;
    for _ in 0..8 {
        let (sb, cb) = beta.sin_cos();
        lat = (ecef.z + ep2 * WGS84_B * sb * sb * sb).atan2(p - WGS84_E2 * WGS84_A * cb * cb * cb);
        beta = (WGS84_B / WGS84_A * lat.tan()).atan();
    }
    let (sin_lat, cos_lat) = lat.sin_cos();
    let height = p * cos_lat + ecef.z * sin_lat - WGS84_A * (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    Ok(Geodetic { lat, lon, height })
}

/// Rotation from the ENU tangent frame at (lat, lon) into ECEF. Columns are
/// the east, north, and up directions expressed in ECEF.
pub fn enu_rotation(lat: f64, lon: f64) -> Matrix3<f64> {
    let (sin_lat, cos_lat) = lat.sin_cos();
    let (sin_lon, cos_lon) = lon.sin_cos();
    Matrix3::new(
        -sin_lon, -sin_lat * cos_lon, cos_lat * cos_lon, //
        cos_lon, -sin_lat * sin_lon, cos_lat * sin_lon, //
        0.0, cos_lat, sin_lat,
    )
}

/// Alignment of the gravity-aligned local world frame to the Earth: an ECEF
/// anchor point and the yaw offset rotating local world into ENU at that
/// anchor. The anchor coincides with the local-world origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameAlignment {
    /// Anchor position in ECEF (m). Maps to the local-world origin.
    pub anchor_ecef: Vector3<f64>,
    /// Geodetic coordinates of the anchor, cached for ENU construction.
    pub anchor_geodetic: Geodetic,
    /// Yaw offset psi (rad): ENU = Rz(psi) * local-world.
    pub yaw_offset: f64,
}

impl FrameAlignment {
    /// Builds an alignment from an ECEF anchor and yaw offset.
    pub fn new(anchor_ecef: Vector3<f64>, yaw_offset: f64) -> Result<Self, FrameError> {
        let anchor_geodetic = ecef_to_geodetic(&anchor_ecef)?;
        Ok(Self { anchor_ecef, anchor_geodetic, yaw_offset })
    }

    /// ENU-to-ECEF rotation at the anchor.
    pub fn enu_rotation(&self) -> Matrix3<f64> {
        enu_rotation(self.anchor_geodetic.lat, self.anchor_geodetic.lon)
    }

    /// Local-world-to-ENU rotation (yaw only).
    pub fn world_to_enu(&self) -> Matrix3<f64> {
        yaw_rotation(self.yaw_offset)
    }

    /// Derivative of [`Self::world_to_enu`] with respect to the yaw offset.
    pub fn world_to_enu_yaw_deriv(&self) -> Matrix3<f64> {
        yaw_rotation_deriv(self.yaw_offset)
    }

    /// Maps a local-world point into ECEF.
    pub fn local_to_ecef(&self, p_w: &Vector3<f64>) -> Vector3<f64> {
        self.enu_rotation() * (self.world_to_enu() * p_w) + self.anchor_ecef
    }

    /// Maps an ECEF point into local-world coordinates.
    pub fn ecef_to_local(&self, p_ecef: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_enu().transpose() * (self.enu_rotation().transpose() * (p_ecef - self.anchor_ecef))
    }

    /// Rotates a local-world vector (velocity, direction) into ECEF.
    pub fn local_dir_to_ecef(&self, v_w: &Vector3<f64>) -> Vector3<f64> {
        self.enu_rotation() * (self.world_to_enu() * v_w)
    }
}

/// Signal propagation correction for Earth rotation during the transit time
/// (the Sagnac effect), in meters. Positive when the rotation carries the
/// receiver away from the satellite signal path.
pub fn sagnac_correction(sat_ecef: &Vector3<f64>, rec_ecef: &Vector3<f64>) -> f64 {
    EARTH_ROTATION_RATE / SPEED_OF_LIGHT * (sat_ecef.x * rec_ecef.y - sat_ecef.y * rec_ecef.x)
}

/// Gradient of [`sagnac_correction`] with respect to the receiver ECEF
/// position, as a row-vector transpose.
pub fn sagnac_gradient_wrt_receiver(sat_ecef: &Vector3<f64>) -> Vector3<f64> {
    EARTH_ROTATION_RATE / SPEED_OF_LIGHT * Vector3::new(-sat_ecef.y, sat_ecef.x, 0.0)
}

/// Elevation and azimuth (radians) of a satellite seen from a receiver, both
/// in ECEF. Azimuth is clockwise from north in [0, 2pi).
pub fn elevation_azimuth(
    sat_ecef: &Vector3<f64>,
    rec_ecef: &Vector3<f64>,
) -> Result<(f64, f64), FrameError> {
    let d = sat_ecef - rec_ecef;
    if d.norm() < 1.0 {
        return Err(FrameError::CoincidentPoints);
    }
    let g = ecef_to_geodetic(rec_ecef)?;
    let enu = enu_rotation(g.lat, g.lon).transpose() * d;
    let horiz = enu.xy().norm();
    let el = enu.z.atan2(horiz);
    let mut az = enu.x.atan2(enu.y);
    if az < 0.0 {
        az += 2.0 * std::f64::consts::PI;
    }
    Ok((el, az))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn equator_prime_meridian_maps_to_semimajor_axis() {
        let p = geodetic_to_ecef(&Geodetic { lat: 0.0, lon: 0.0, height: 0.0 });
        assert_relative_eq!(p, Vector3::new(WGS84_A, 0.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn enu_rotation_at_zero_zero() {
        // At (0, 0): east = +y, north = +z, up = +x.
        let r = enu_rotation(0.0, 0.0);
        let expected = Matrix3::new(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        assert_relative_eq!(r, expected, epsilon = 1e-15);
    }

    #[test]
    fn sagnac_hand_computed_case() {
        // One satellite radius along +x, receiver one earth radius along +y:
        // (omega_e / c) * 2.66e7 * 6.378e6 = 41.267 m, worked out by hand.
        let s = sagnac_correction(&Vector3::new(2.66e7, 0.0, 0.0), &Vector3::new(0.0, 6.378e6, 0.0));
        assert_relative_eq!(s, 41.2668, epsilon = 1e-2);
    }

    #[test]
    fn sagnac_gradient_matches_finite_difference() {
        let sat = Vector3::new(1.9e7, -1.1e7, 1.4e7);
        let rec = Vector3::new(-2.8e6, 4.7e6, 3.2e6);
        let h = 1.0;
        for axis in 0..3 {
            let mut dp = Vector3::zeros();
            dp[axis] = h;
            let fd = (sagnac_correction(&sat, &(rec + dp)) - sagnac_correction(&sat, &(rec - dp))) / (2.0 * h);
            assert_relative_eq!(sagnac_gradient_wrt_receiver(&sat)[axis], fd, epsilon = 1e-12);
        }
    }

    #[test]
    fn geocenter_is_rejected() {
        let e = ecef_to_geodetic(&Vector3::new(1e-4, 0.0, 0.0));
        assert_eq!(e, Err(FrameError::NearSingularOrigin(1e-3)));
    }

    #[test]
    fn alignment_quarter_turn_moves_east_to_north() {
        let anchor = geodetic_to_ecef(&Geodetic { lat: 0.5, lon: 2.0, height: 30.0 });
        let a = FrameAlignment::new(anchor, std::f64::consts::FRAC_PI_2).unwrap();
        // Local +x with a 90 degree yaw offset lands on ENU north.
        let p = a.local_to_ecef(&Vector3::new(1.0, 0.0, 0.0));
        let enu = a.enu_rotation().transpose() * (p - anchor);
        assert_relative_eq!(enu, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn elevation_azimuth_of_zenith_satellite() {
        let rec = geodetic_to_ecef(&Geodetic { lat: 0.6, lon: -1.2, height: 100.0 });
        let sat = rec * (2.66e7 / rec.norm());
        let (el, _az) = elevation_azimuth(&sat, &rec).unwrap();
        // Receiver position is not exactly radial on the ellipsoid, so the
        // zenith direction deviates slightly from the geocentric ray.
        assert!(el > 1.55, "elevation {el} should be near pi/2");
    }

    #[test]
    fn elevation_azimuth_cardinal_directions() {
        let rec = geodetic_to_ecef(&Geodetic { lat: 0.0, lon: 0.0, height: 0.0 });
        let r = enu_rotation(0.0, 0.0);
        let north = rec + r * Vector3::new(0.0, 1e6, 1e6);
        let (_el, az) = elevation_azimuth(&north, &rec).unwrap();
        assert_relative_eq!(az, 0.0, epsilon = 1e-12);
        let east = rec + r * Vector3::new(1e6, 0.0, 1e6);
        let (el, az) = elevation_azimuth(&east, &rec).unwrap();
        assert_relative_eq!(az, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_relative_eq!(el, std::f64::consts::FRAC_PI_4, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn geodetic_roundtrip(
            lat in -1.55f64..1.55,
            lon in -3.14f64..3.14,
            h in -1.0e4f64..1.0e4,
        ) {
            let g = Geodetic { lat, lon, height: h };
            let ecef = geodetic_to_ecef(&g);
            let back = ecef_to_geodetic(&ecef).unwrap();
            let ecef2 = geodetic_to_ecef(&back);
            prop_assert!((ecef - ecef2).norm() < 1e-6);
            prop_assert!((back.lat - lat).abs() < 1e-11);
            prop_assert!((back.height - h).abs() < 1e-6);
        }

        #[test]
        fn enu_rotation_is_orthonormal(lat in -1.57f64..1.57, lon in -3.14f64..3.14) {
            let r = enu_rotation(lat, lon);
            let err = (r.transpose() * r - Matrix3::identity()).norm();
            prop_assert!(err < 1e-14);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-14);
        }

        #[test]
        fn local_ecef_roundtrip(
            yaw in -3.1f64..3.1,
            px in -500.0f64..500.0,
            py in -500.0f64..500.0,
            pz in -200.0f64..200.0,
        ) {
            let anchor = geodetic_to_ecef(&Geodetic { lat: 0.52, lon: 2.09, height: 20.0 });
            let a = FrameAlignment::new(anchor, yaw).unwrap();
            let p = Vector3::new(px, py, pz);
            let back = a.ecef_to_local(&a.local_to_ecef(&p));
            prop_assert!((back - p).norm() < 1e-9);
        }
    }
}
