//! Image ↔ bird's-eye-view mapping for a calibrated monocular camera.
//!
//! Camera frame: x right, y down, z forward. A level camera mounted `h`
//! metres above flat ground has ground normal `eta = (0, -1, 0)` and every
//! ground point satisfies `etaᵀ·B = -h`, i.e. `B_y = h`.
//!
//! An image reference point `b = (x, y, 1)` is lifted onto the ground by
//! scaling its back-projected ray:
//!
//! ```text
//! B = -h · K⁻¹b / (etaᵀ K⁻¹b)
//! ```

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rays with `|etaᵀK⁻¹b|` below this never meet the ground at a finite depth.
pub const HORIZON_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("intrinsic matrix is singular")]
    SingularIntrinsics,
    #[error("ground normal must have unit length, got norm {0}")]
    NonUnitNormal(f64),
    #[error("camera height must be positive, got {0}")]
    BadHeight(f64),
    #[error("pixel ray is parallel to the ground plane (|etaᵀK⁻¹b| = {0:e})")]
    HorizonDegenerate(f64),
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("homogeneous coordinate must be 1, got {0}")]
    NotNormalized(f64),
    #[error("non-finite coordinate")]
    NonFinite,
}

/// Intrinsics plus ground-plane pose. Serialized as `{K: [9 floats, row-major], eta: [3], h}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraModelRepr", into = "CameraModelRepr")]
pub struct CameraModel {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    eta: Vector3<f64>,
    h: f64,
}

#[derive(Serialize, Deserialize)]
struct CameraModelRepr {
    #[serde(rename = "K")]
    k: [f64; 9],
    eta: [f64; 3],
    h: f64,
}

impl TryFrom<CameraModelRepr> for CameraModel {
    type Error = GeometryError;

    fn try_from(r: CameraModelRepr) -> Result<Self, Self::Error> {
        CameraModel::new(Matrix3::from_row_slice(&r.k), Vector3::from(r.eta), r.h)
    }
}

impl From<CameraModel> for CameraModelRepr {
    fn from(c: CameraModel) -> Self {
        let mut k = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                k[i * 3 + j] = c.k[(i, j)];
            }
        }
        Self { k, eta: [c.eta.x, c.eta.y, c.eta.z], h: c.h }
    }
}

impl CameraModel {
    pub fn new(k: Matrix3<f64>, eta: Vector3<f64>, h: f64) -> Result<Self, GeometryError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(GeometryError::BadHeight(h));
        }
        let norm = eta.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NonUnitNormal(norm));
        }
        let k_inv = k.try_inverse().ok_or(GeometryError::SingularIntrinsics)?;
        Ok(Self { k, k_inv, eta, h })
    }

    /// Pinhole intrinsics with square pixels and a level camera.
    pub fn level_pinhole(focal: f64, cx: f64, cy: f64, h: f64) -> Result<Self, GeometryError> {
        let k = Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0);
        Self::new(k, Vector3::new(0.0, -1.0, 0.0), h)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.eta
    }

    pub fn height(&self) -> f64 {
        self.h
    }

    /// Ground point in the camera frame from bird's-eye (lateral, forward) metres.
    pub fn ground_point(&self, lateral: f64, forward: f64) -> BevPoint {
        // Solve etaᵀB = -h for the vertical coordinate of a level-ish plane.
        let (ex, ey, ez) = (self.eta.x, self.eta.y, self.eta.z);
        let y = (-self.h - ex * lateral - ez * forward) / ey;
        BevPoint(Vector3::new(lateral, y, forward))
    }
}

/// Homogeneous image coordinate with third component 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagePoint(Vector3<f64>);

impl ImagePoint {
    pub fn new(x: f64, y: f64) -> Result<Self, GeometryError> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self(Vector3::new(x, y, 1.0)))
    }

    /// Accepts any homogeneous triple with nonzero last component.
    pub fn from_homogeneous(v: Vector3<f64>) -> Result<Self, GeometryError> {
        if v.z == 0.0 || !v.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NotNormalized(v.z));
        }
        Self::new(v.x / v.z, v.y / v.z)
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn homogeneous(&self) -> &Vector3<f64> {
        &self.0
    }
}

/// Ground-plane point in camera-frame metres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevPoint(pub Vector3<f64>);

impl BevPoint {
    pub fn lateral(&self) -> f64 {
        self.0.x
    }

    pub fn forward(&self) -> f64 {
        self.0.z
    }

    /// Signed residual `etaᵀB + h`; zero for points on the ground.
    pub fn plane_residual(&self, cam: &CameraModel) -> f64 {
        cam.eta.dot(&self.0) + cam.h
    }
}

/// Lifts an image point onto the ground plane.
pub fn birdseye_project(b: &ImagePoint, cam: &CameraModel) -> Result<BevPoint, GeometryError> {
    lift_ray(&b.0, cam)
}

fn lift_ray(b: &Vector3<f64>, cam: &CameraModel) -> Result<BevPoint, GeometryError> {
    let ray = cam.k_inv * b;
    let denom = cam.eta.dot(&ray);
    if denom.abs() < HORIZON_EPS {
        return Err(GeometryError::HorizonDegenerate(denom.abs()));
    }
    Ok(BevPoint(ray * (-cam.h / denom)))
}

/// Perspective projection of a camera-frame point into the image.
pub fn project_to_image(point: &BevPoint, cam: &CameraModel) -> Result<ImagePoint, GeometryError> {
    if point.0.z <= 0.0 {
        return Err(GeometryError::BehindCamera(point.0.z));
    }
    let p = cam.k * point.0;
    if p.z.abs() < f64::MIN_POSITIVE {
        return Err(GeometryError::BehindCamera(p.z));
    }
    ImagePoint::new(p.x / p.z, p.y / p.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_camera() -> CameraModel {
        CameraModel::new(Matrix3::identity(), Vector3::new(0.0, 1.0, 0.0), 1.5).unwrap()
    }

    fn dashcam() -> CameraModel {
        CameraModel::level_pinhole(720.0, 640.0, 360.0, 1.6).unwrap()
    }

    #[test]
    fn identity_intrinsics_hand_value() {
        // K⁻¹b = (0,1,1), etaᵀK⁻¹b = 1, B = -1.5·(0,1,1).
        let b = ImagePoint::new(0.0, 1.0).unwrap();
        let bev = birdseye_project(&b, &identity_camera()).unwrap();
        assert_eq!(bev.0, Vector3::new(0.0, -1.5, -1.5));
    }

    #[test]
    fn homogeneous_scale_cancels() {
        let cam = dashcam();
        let b = Vector3::new(700.0, 500.0, 1.0);
        let reference = lift_ray(&b, &cam).unwrap();
        for lambda in [0.5, 2.0, 37.0] {
            let scaled = lift_ray(&(b * lambda), &cam).unwrap();
            assert!((scaled.0 - reference.0).norm() < 1e-12);
            let renorm = ImagePoint::from_homogeneous(b * lambda).unwrap();
            let again = birdseye_project(&renorm, &cam).unwrap();
            assert!((again.0 - reference.0).norm() < 1e-9);
        }
    }

    #[test]
    fn outputs_lie_on_plane() {
        let cam = dashcam();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let b = ImagePoint::new(rng.random_range(0.0..1280.0), rng.random_range(370.0..720.0))
                .unwrap();
            let bev = birdseye_project(&b, &cam).unwrap();
            assert!(bev.plane_residual(&cam).abs() < 1e-6);
            assert!((bev.0.y - 1.6).abs() < 1e-9);
        }
    }

    #[test]
    fn optical_axis_ground_point_maps_to_principal_point() {
        let (f, cx, cy, h) = (800.0, 320.0, 240.0, 2.0);
        let pitch: f64 = 0.2;
        // Pitched down: the optical axis meets the ground at depth h / sin(pitch).
        let eta = Vector3::new(0.0, -pitch.cos(), -pitch.sin());
        let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
        let cam_down = CameraModel::new(k, eta, h).unwrap();
        let depth = h / pitch.sin();
        let on_axis = BevPoint(Vector3::new(0.0, 0.0, depth));
        assert!(on_axis.plane_residual(&cam_down).abs() < 1e-9);
        let img = project_to_image(&on_axis, &cam_down).unwrap();
        assert!((img.x() - cx).abs() < 1e-9 && (img.y() - cy).abs() < 1e-9);
        let back = birdseye_project(&img, &cam_down).unwrap();
        assert!((back.0 - on_axis.0).norm() < 1e-9);
    }

    #[test]
    fn horizon_row_is_degenerate() {
        let cam = dashcam();
        let horizon = ImagePoint::new(100.0, 360.0).unwrap();
        assert!(matches!(
            birdseye_project(&horizon, &cam),
            Err(GeometryError::HorizonDegenerate(_))
        ));
    }

    #[test]
    fn behind_camera_is_rejected() {
        let cam = dashcam();
        let p = cam.ground_point(1.0, -4.0);
        assert!(matches!(project_to_image(&p, &cam), Err(GeometryError::BehindCamera(_))));
    }

    #[test]
    fn invalid_cameras_are_rejected() {
        let eye = Matrix3::identity();
        assert!(CameraModel::new(eye, Vector3::new(0.0, 2.0, 0.0), 1.0).is_err());
        assert!(CameraModel::new(eye, Vector3::new(0.0, 1.0, 0.0), 0.0).is_err());
        assert!(CameraModel::new(Matrix3::zeros(), Vector3::new(0.0, 1.0, 0.0), 1.0).is_err());
    }

    #[test]
    fn camera_json_layout() {
        let cam = dashcam();
        let v = serde_json::to_value(&cam).unwrap();
        assert_eq!(v["K"].as_array().unwrap().len(), 9);
        assert_eq!(v["K"][2], 640.0);
        assert_eq!(v["eta"][1], -1.0);
        let back: CameraModel = serde_json::from_value(v).unwrap();
        assert_eq!(back, cam);
        let bad = serde_json::json!({"K": [1,0,0,0,1,0,0,0,1], "eta": [0, 3, 0], "h": 1});
        assert!(serde_json::from_value::<CameraModel>(bad).is_err());
    }
}
