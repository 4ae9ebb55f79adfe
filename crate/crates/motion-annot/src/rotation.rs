//! Axis-angle rotation utilities.
//!
//! Rotations cross the public API as axis-angle vectors (direction = axis,
//! norm = angle in radians) and are expanded to matrices internally for
//! composition. The derivative of the rotation matrix with respect to the
//! axis-angle components uses the compact closed form from exponential
//! coordinates.

use nalgebra::{Matrix3, Vector3};
use std::f64::consts::PI;

const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula: axis-angle vector to rotation matrix.
pub fn rotation_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    let angle = v.norm();
    if angle < SMALL_ANGLE {
        // First-order expansion is exact to within ~1e-16 here.
        return Matrix3::identity() + skew(v);
    }
    let k = skew(&(v / angle));
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// Rotation matrix plus its partial derivatives w.r.t. the three axis-angle
/// components (Gallego & Yezzi closed form).
pub fn rotation_with_derivatives(v: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let r = rotation_matrix(v);
    let angle_sq = v.norm_squared();
    let mut derivs = [Matrix3::zeros(); 3];
    if angle_sq < SMALL_ANGLE * SMALL_ANGLE {
        for (i, d) in derivs.iter_mut().enumerate() {
            let mut e = Vector3::zeros();
            e[i] = 1.0;
            *d = skew(&e);
        }
        return (r, derivs);
    }
    let eye_minus_r = Matrix3::identity() - r;
    for (i, d) in derivs.iter_mut().enumerate() {
        let mut e = Vector3::zeros();
        e[i] = 1.0;
        let col: Vector3<f64> = eye_minus_r * e;
        *d = (skew(v) * v[i] + skew(&v.cross(&col))) * r / angle_sq;
    }
    (r, derivs)
}

/// Matrix logarithm of a rotation: inverse of [`rotation_matrix`].
///
/// Returns an axis-angle vector with norm in `[0, pi]`.
pub fn log_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_angle = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos_angle.acos();
    if angle < SMALL_ANGLE {
        return Vector3::new(
            (r[(2, 1)] - r[(1, 2)]) * 0.5,
            (r[(0, 2)] - r[(2, 0)]) * 0.5,
            (r[(1, 0)] - r[(0, 1)]) * 0.5,
        );
    }
    if (PI - angle).abs() < 1e-6 {
        // Near pi the antisymmetric part vanishes; recover the axis from
        // the symmetric part R = 2*a*a^T - I.
        let b = (r + Matrix3::identity()) * 0.5;
        let mut axis = Vector3::new(b[(0, 0)].sqrt(), b[(1, 1)].sqrt(), b[(2, 2)].sqrt());
        // Fix signs using the largest component.
        let imax = if axis.x >= axis.y && axis.x >= axis.z {
            0
        } else if axis.y >= axis.z {
            1
        } else {
            2
        };
        let sign = |x: f64| if x >= 0.0 { 1.0 } else { -1.0 };
        match imax {
            0 => {
                axis.y *= sign(b[(0, 1)]);
                axis.z *= sign(b[(0, 2)]);
            }
            1 => {
                axis.x *= sign(b[(0, 1)]);
                axis.z *= sign(b[(1, 2)]);
            }
            _ => {
                axis.x *= sign(b[(0, 2)]);
                axis.y *= sign(b[(1, 2)]);
            }
        }
        return axis.normalize() * angle;
    }
    let axis = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) / (2.0 * angle.sin());
    axis * angle
}

/// Wraps an axis-angle vector so its magnitude lies in `[0, pi]` while
/// representing the same rotation.
pub fn canonicalize_axis_angle(v: &Vector3<f64>) -> Vector3<f64> {
    let angle = v.norm();
    if angle < SMALL_ANGLE {
        return *v;
    }
    let two_pi = 2.0 * PI;
    let wrapped = angle.rem_euclid(two_pi);
    let axis = v / angle;
    if wrapped > PI {
        axis * (wrapped - two_pi)
    } else {
        axis * wrapped
    }
}
