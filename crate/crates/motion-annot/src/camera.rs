//! Pinhole camera model: intrinsics plus world-to-camera extrinsics.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

const MIN_DEPTH: f64 = 1e-6;
const ORTHONORMAL_TOL: f64 = 1e-9;

/// Calibrated pinhole camera. `rotation` and `translation` map world points
/// into camera coordinates: `x_cam = R * x_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraModel {
    pub fn new(
        name: impl Into<String>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(Error::Validation(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        let gram_err = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        if gram_err > ORTHONORMAL_TOL {
            return Err(Error::Validation(format!(
                "camera rotation is not orthonormal (max deviation {gram_err:.3e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Validation(
                "camera rotation must have determinant +1".into(),
            ));
        }
        if translation.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("non-finite camera translation".into()));
        }
        Ok(Self {
            name: name.into(),
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Perspective projection of a world point to pixels.
    ///
    /// Fails when the point is not in front of the camera.
    pub fn project(&self, point: &Vector3<f64>) -> Result<[f64; 2]> {
        let pc = self.to_camera(point);
        if pc.z <= MIN_DEPTH {
            return Err(Error::BehindCamera { depth: pc.z });
        }
        Ok([
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ])
    }

    /// Back-projects a pixel to a unit ray direction in world coordinates.
    pub fn pixel_ray(&self, uv: [f64; 2]) -> Vector3<f64> {
        let dir_cam = Vector3::new((uv[0] - self.cx) / self.fx, (uv[1] - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * dir_cam).normalize()
    }

    /// The 3x4 projection matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> nalgebra::Matrix3x4<f64> {
        let k = Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        let kr = k * self.rotation;
        let kt = k * self.translation;
        nalgebra::Matrix3x4::from_columns(&[
            kr.column(0).into(),
            kr.column(1).into(),
            kr.column(2).into(),
            kt,
        ])
    }
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    name: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major 3x3.
    rotation: [f64; 9],
    translation: [f64; 3],
}

/// Loads a JSON array of camera descriptions.
pub fn load_cameras(path: &Path) -> Result<Vec<CameraModel>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let parsed: Vec<CameraJson> = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    parsed
        .into_iter()
        .map(|c| {
            let r = Matrix3::from_row_slice(&c.rotation);
            CameraModel::new(
                c.name,
                c.fx,
                c.fy,
                c.cx,
                c.cy,
                r,
                Vector3::new(c.translation[0], c.translation[1], c.translation[2]),
            )
        })
        .collect()
}

/// Writes cameras as the JSON array consumed by [`load_cameras`].
pub fn save_cameras(path: &Path, cameras: &[CameraModel]) -> Result<()> {
    let docs: Vec<CameraJson> = cameras
        .iter()
        .map(|c| CameraJson {
            name: c.name.clone(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: {
                let mut r = [0.0; 9];
                for row in 0..3 {
                    for col in 0..3 {
                        r[row * 3 + col] = c.rotation[(row, col)];
                    }
                }
                r
            },
            translation: [c.translation.x, c.translation.y, c.translation.z],
        })
        .collect();
    let text = serde_json::to_string_pretty(&docs).expect("cameras serialize");
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::rotation_matrix;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_camera() -> CameraModel {
        CameraModel::new(
            "cam",
            1000.0,
            1000.0,
            500.0,
            500.0,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = identity_camera();
        let uv = cam.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(uv[0], 500.0, epsilon = 1e-12);
        assert_relative_eq!(uv[1], 500.0, epsilon = 1e-12);
    }

    #[test]
    fn similar_triangles() {
        let cam = identity_camera();
        let uv = cam.project(&Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert_relative_eq!(uv[0], 600.0, epsilon = 1e-12);
        assert_relative_eq!(uv[1], 500.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_point_is_rejected() {
        let cam = identity_camera();
        let err = cam.project(&Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(err, Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn projected_pixel_ray_passes_through_the_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let axis = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let cam = CameraModel::new(
                "c",
                rng.gen_range(500.0..1500.0),
                rng.gen_range(500.0..1500.0),
                480.0,
                270.0,
                rotation_matrix(&axis),
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(2.0..4.0),
                ),
            )
            .unwrap();
            let p = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            if cam.to_camera(&p).z <= 0.1 {
                continue;
            }
            let uv = cam.project(&p).unwrap();
            let ray = cam.pixel_ray(uv);
            let c = cam.center();
            // Distance from the point to the ray.
            let d = (p - c).cross(&ray).norm();
            assert!(d < 1e-9, "ray misses point by {d}");
        }
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.1;
        assert!(CameraModel::new("c", 1.0, 1.0, 0.0, 0.0, r, Vector3::zeros()).is_err());
    }

    #[test]
    fn cameras_round_trip_through_json() {
        let cams = vec![
            identity_camera(),
            CameraModel::new(
                "side",
                900.0,
                910.0,
                480.0,
                270.0,
                rotation_matrix(&Vector3::new(0.1, -0.2, 0.3)),
                Vector3::new(0.5, -0.1, 3.0),
            )
            .unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cameras.json");
        save_cameras(&path, &cams).unwrap();
        let loaded = load_cameras(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in cams.iter().zip(&loaded) {
            assert_eq!(a.name, b.name);
            assert!((a.rotation() - b.rotation()).abs().max() < 1e-12);
            assert!((a.translation() - b.translation()).norm() < 1e-12);
        }
    }
}
