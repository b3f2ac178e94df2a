//! Small linear-algebra helpers used by the measurement models and factors.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};

/// Skew-symmetric matrix of `v`, so that `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left quaternion product matrix in (w, x, y, z) ordering:
/// `quat_to_vec4(p ⊗ q) == quat_left(p) * quat_to_vec4(q)`.
pub fn quat_left(q: &Quaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// Right quaternion product matrix in (w, x, y, z) ordering:
/// `quat_to_vec4(p ⊗ q) == quat_right(q) * quat_to_vec4(p)`.
pub fn quat_right(q: &Quaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// Rotation about +z by `yaw` radians. Maps local-world coordinates into the
/// ENU navigation frame when `yaw` is the heading offset between the two.
pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Derivative of [`yaw_rotation`] with respect to the yaw angle.
pub fn yaw_rotation_deriv(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Wraps an angle to (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Right-multiplicative retraction `q ⊗ exp(theta)` used for all attitude
/// updates and finite-difference checks.
pub fn quat_boxplus(q: &UnitQuaternion<f64>, theta: &Vector3<f64>) -> UnitQuaternion<f64> {
    q * UnitQuaternion::from_scaled_axis(*theta)
}

/// Local difference `2 * vec(q_ref^-1 ⊗ q)`, the inverse of [`quat_boxplus`]
/// to first order.
pub fn quat_boxminus(q: &UnitQuaternion<f64>, q_ref: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut e = q_ref.inverse() * q;
    if e.w < 0.0 {
        e = UnitQuaternion::from_quaternion(-e.into_inner());
    }
    2.0 * e.imag()
}

/// Quaternion for a small rotation `theta` using the first-order map
/// `[1, theta/2]` followed by normalization.
pub fn small_quat(theta: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::from_parts(1.0, 0.5 * theta))
}
