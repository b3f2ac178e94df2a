//! Pinhole camera model, two-view triangulation, and the inverse-depth
//! reprojection residual with analytic Jacobians for host and observer
//! poses and the feature's inverse depth.

use nalgebra::{Matrix3, SMatrix, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::skew;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("triangulated depth {0} outside the usable range")]
    DepthOutOfRange(f64),
    #[error("triangulation parallax {0} rad below threshold")]
    InsufficientParallax(f64),
}

/// Minimum and maximum usable feature depths (m).
pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 200.0;

/// Minimum ray angle (rad) for accepting a two-view triangulation.
pub const MIN_PARALLAX: f64 = 1e-3;

/// Pinhole camera intrinsics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    /// Intrinsics from full horizontal/vertical fields of view (radians).
    pub fn from_fov(width: u32, height: u32, hfov: f64, vfov: f64) -> Self {
        Self {
            fx: 0.5 * width as f64 / (0.5 * hfov).tan(),
            fy: 0.5 * height as f64 / (0.5 * vfov).tan(),
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Result<Vector2<f64>, VisionError> {
        if p_cam.z < 1e-6 {
            return Err(VisionError::BehindCamera(p_cam.z));
        }
        Ok(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// Unit-depth ray (z = 1) through a pixel.
    pub fn unproject(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    /// True when a pixel lands inside the image with the given margin.
    pub fn in_view(&self, px: &Vector2<f64>, margin: f64) -> bool {
        px.x >= margin
            && px.y >= margin
            && px.x <= self.width as f64 - 1.0 - margin
            && px.y <= self.height as f64 - 1.0 - margin
    }
}

/// Fixed body-to-camera transform; camera point = r_bc^-1 (p_body - p_bc).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    pub r_bc: UnitQuaternion<f64>,
    pub p_bc: Vector3<f64>,
}

impl Default for CameraExtrinsics {
    fn default() -> Self {
        Self { r_bc: UnitQuaternion::identity(), p_bc: Vector3::zeros() }
    }
}

/// Two-view midpoint triangulation. Rays are unit-depth directions in each
/// camera frame; poses map camera to world. Returns the inverse depth in
/// the first (host) camera.
pub fn triangulate_inverse_depth(
    ray_i: &Vector3<f64>,
    p_i: &Vector3<f64>,
    q_i: &UnitQuaternion<f64>,
    ray_j: &Vector3<f64>,
    p_j: &Vector3<f64>,
    q_j: &UnitQuaternion<f64>,
) -> Result<f64, VisionError> {
    let d_i = (q_i * ray_i).normalize();
    let d_j = (q_j * ray_j).normalize();
    let parallax = d_i.cross(&d_j).norm().atan2(d_i.dot(&d_j));
    if parallax < MIN_PARALLAX {
        return Err(VisionError::InsufficientParallax(parallax));
    }
    let b = p_j - p_i;
    // Closest points on the two rays: solve the 2x2 normal equations.
    let (dd_ii, dd_ij, dd_jj) = (d_i.dot(&d_i), d_i.dot(&d_j), d_j.dot(&d_j));
    let det = dd_ii * dd_jj - dd_ij * dd_ij;
    let s = (dd_jj * d_i.dot(&b) - dd_ij * d_j.dot(&b)) / det;
    let t = (dd_ij * d_i.dot(&b) - dd_ii * d_j.dot(&b)) / det;
    let midpoint = 0.5 * ((p_i + s * d_i) + (p_j + t * d_j));
    let depth = (q_i.inverse() * (midpoint - p_i)).z;
    if !(MIN_DEPTH..=MAX_DEPTH).contains(&depth) {
        return Err(VisionError::DepthOutOfRange(depth));
    }
    Ok(1.0 / depth)
}

/// Residual and Jacobians of one inverse-depth reprojection factor.
#[derive(Debug, Clone)]
pub struct VisualFactorEval {
    /// Pixel residual, predicted minus observed.
    pub residual: Vector2<f64>,
    /// Jacobian with respect to host body pose error [dp, dtheta].
    pub jacobian_i: SMatrix<f64, 2, 6>,
    /// Jacobian with respect to observer body pose error [dp, dtheta].
    pub jacobian_j: SMatrix<f64, 2, 6>,
    /// Jacobian with respect to the inverse depth.
    pub jacobian_rho: Vector2<f64>,
}

/// Reprojects a feature hosted in frame i (unit-depth ray `host_ray`,
/// inverse depth `rho`) into observer frame j and differences against the
/// observed pixel there. Body poses are world-from-body.
#[allow(clippy::too_many_arguments)]
pub fn reprojection_residual(
    cam: &CameraModel,
    ext: &CameraExtrinsics,
    host_ray: &Vector3<f64>,
    rho: f64,
    p_i: &Vector3<f64>,
    q_i: &UnitQuaternion<f64>,
    p_j: &Vector3<f64>,
    q_j: &UnitQuaternion<f64>,
    observed: &Vector2<f64>,
) -> Result<VisualFactorEval, VisionError> {
    if rho <= 1.0 / MAX_DEPTH || rho >= 1.0 / MIN_DEPTH {
        return Err(VisionError::DepthOutOfRange(1.0 / rho));
    }
    let r_wi = q_i.to_rotation_matrix().into_inner();
    let r_wj = q_j.to_rotation_matrix().into_inner();
    let r_bc = ext.r_bc.to_rotation_matrix().into_inner();

    let p_ci = host_ray / rho;
    let h = r_bc * p_ci + ext.p_bc;
    let p_w = r_wi * h + p_i;
    let in_body_j = r_wj.transpose() * (p_w - p_j);
    let p_cj = r_bc.transpose() * (in_body_j - ext.p_bc);
    let predicted = cam.project(&p_cj)?;

    let z_inv = 1.0 / p_cj.z;
    let j_proj = SMatrix::<f64, 2, 3>::new(
        cam.fx * z_inv,
        0.0,
        -cam.fx * p_cj.x * z_inv * z_inv,
        0.0,
        cam.fy * z_inv,
        -cam.fy * p_cj.y * z_inv * z_inv,
    );
    let m: Matrix3<f64> = r_bc.transpose() * r_wj.transpose();

    let mut jacobian_i = SMatrix::<f64, 2, 6>::zeros();
    jacobian_i.fixed_view_mut::<2, 3>(0, 0).copy_from(&(j_proj * m));
    jacobian_i.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-j_proj * m * r_wi * skew(&h)));

    let mut jacobian_j = SMatrix::<f64, 2, 6>::zeros();
    jacobian_j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-j_proj * m));
    jacobian_j
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(j_proj * r_bc.transpose() * skew(&in_body_j)));

    let jacobian_rho = j_proj * (m * r_wi * r_bc * (-host_ray / (rho * rho)));

    Ok(VisualFactorEval {
        residual: predicted - observed,
        jacobian_i,
        jacobian_j,
        jacobian_rho,
    })
}

/// Huber IRLS weight for a whitened residual norm: 1 inside the quadratic
/// region, delta/|r| outside. Apply its square root to residual and rows.
pub fn huber_weight(residual_norm: f64, delta: f64) -> f64 {
    if residual_norm <= delta {
        1.0
    } else {
        delta / residual_norm
    }
}
