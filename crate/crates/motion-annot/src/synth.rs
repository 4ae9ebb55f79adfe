//! Synthetic motion and camera fixtures.
//!
//! Everything here is generated from the crate's own forward kinematics and
//! projection, so tests and examples can measure recovery error against an
//! exact ground truth without external data.

use crate::camera::CameraModel;
use crate::keypoints::{KeypointFrame2D, KeypointFrame3D};
use crate::kinematics::forward_kinematics;
use crate::pose::{MotionSequence, PoseState};
use crate::skeleton::{default_skeleton, SkeletonShape, SkeletonTopology};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pelvis height that puts the rest-pose toes exactly at z = 0.
pub const STANDING_PELVIS_HEIGHT: f64 = 0.915;

/// The default topology/shape pair used by all fixtures.
pub fn default_setup() -> (SkeletonTopology, SkeletonShape) {
    default_skeleton()
}

/// Standing rest pose at the given pelvis position.
pub fn standing_pose(root: [f64; 3]) -> PoseState {
    let mut pose = PoseState::rest();
    pose.r = root;
    pose
}

/// A constant standing sequence.
pub fn standing_sequence(frames: usize, fps: f64) -> MotionSequence {
    let (_, shape) = default_setup();
    let pose = standing_pose([0.0, 0.0, STANDING_PELVIS_HEIGHT]);
    MotionSequence::new(fps, vec![pose; frames], shape).unwrap()
}

/// Gentle articulated motion: elbows and one knee flex sinusoidally while
/// the root drifts slowly. Useful as a realistic fitting target.
pub fn waving_sequence(frames: usize, fps: f64) -> MotionSequence {
    let (_, shape) = default_setup();
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let phase = t as f64 / fps;
        let mut pose = standing_pose([
            0.05 * (0.4 * phase).sin(),
            0.03 * (0.3 * phase).cos() - 0.03,
            STANDING_PELVIS_HEIGHT,
        ]);
        let bend = 0.5 + 0.25 * (0.7 * phase).sin();
        // Elbow flexion about the elbow's local x axis.
        pose.theta_body[18] = [bend, 0.0, 0.0];
        pose.theta_body[19] = [-bend * 0.8, 0.0, 0.0];
        // Slight knee bend and torso sway.
        pose.theta_body[4] = [0.1 * (0.6 * phase).sin(), 0.0, 0.0];
        pose.theta_body[3] = [0.0, 0.06 * (0.5 * phase).sin(), 0.0];
        // A little finger curl so hand joints move too.
        for h in 0..30 {
            pose.theta_hands[h] = [0.2 + 0.1 * (0.5 * phase).sin(), 0.0, 0.0];
        }
        out.push(pose);
    }
    MotionSequence::new(fps, out, shape).unwrap()
}

/// Constant articulation with the root translating quadratically in time.
/// Keypoint trajectories are then exact quadratics, which a second-order
/// smoothing filter reproduces without error.
pub fn quadratic_translation_sequence(frames: usize, fps: f64) -> MotionSequence {
    let (_, shape) = default_setup();
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let s = t as f64 / frames.max(1) as f64;
        let mut pose = standing_pose([
            0.6 * s - 0.3 * s * s,
            0.2 * s * s,
            STANDING_PELVIS_HEIGHT + 0.05 * s,
        ]);
        pose.theta_body[18] = [0.6, 0.0, 0.0];
        pose.theta_body[19] = [-0.5, 0.0, 0.0];
        out.push(pose);
    }
    MotionSequence::new(fps, out, shape).unwrap()
}

/// Adds independent axis-angle noise to every rotation of every frame.
pub fn perturb_rotations(seq: &MotionSequence, sigma: f64, seed: u64) -> MotionSequence {
    perturb_sequence(seq, sigma, 0.0, seed)
}

/// Perturbs every joint rotation by a random axis and an angle drawn from
/// `N(0, sigma)`: rotation errors of magnitude about `sigma` radians.
pub fn perturb_rotations_by_angle(seq: &MotionSequence, sigma: f64, seed: u64) -> MotionSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = seq.clone();
    for pose in out.frames.iter_mut() {
        let mut bump = |a: &mut [f64; 3], rng: &mut ChaCha8Rng| {
            let axis = loop {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let n = v.norm();
                if n > 1e-3 && n <= 1.0 {
                    break v / n;
                }
            };
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let angle = sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            a[0] += axis.x * angle;
            a[1] += axis.y * angle;
            a[2] += axis.z * angle;
        };
        for i in 0..pose.theta_body.len() {
            bump(&mut pose.theta_body[i], &mut rng);
        }
        for i in 0..pose.theta_hands.len() {
            bump(&mut pose.theta_hands[i], &mut rng);
        }
        bump(&mut pose.theta_jaw, &mut rng);
    }
    out
}

/// Adds independent Gaussian noise to every rotation and translation.
pub fn perturb_sequence(
    seq: &MotionSequence,
    sigma_rot: f64,
    sigma_trans: f64,
    seed: u64,
) -> MotionSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = move |sigma: f64| -> f64 {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let mut out = seq.clone();
    for pose in out.frames.iter_mut() {
        for a in pose.theta_body.iter_mut().chain(pose.theta_hands.iter_mut()) {
            for x in a.iter_mut() {
                *x += gauss(sigma_rot);
            }
        }
        for x in pose.theta_jaw.iter_mut() {
            *x += gauss(sigma_rot);
        }
        for x in pose.r.iter_mut() {
            *x += gauss(sigma_trans);
        }
    }
    out
}

/// A camera on a ring, looking at `target` (z-up world).
pub fn look_at_camera(
    name: impl Into<String>,
    center: Vector3<f64>,
    target: Vector3<f64>,
    focal: f64,
) -> CameraModel {
    let z = (target - center).normalize();
    let up = Vector3::new(0.0, 0.0, 1.0);
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let translation = -(rotation * center);
    CameraModel::new(name, focal, focal, 960.0, 540.0, rotation, translation).unwrap()
}

/// Evenly spaced cameras on a horizontal ring around the subject.
pub fn camera_ring(count: usize, radius: f64, height: f64, target: [f64; 3]) -> Vec<CameraModel> {
    (0..count)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / count.max(1) as f64 - 0.5;
            look_at_camera(
                format!("cam{i}"),
                Vector3::new(radius * a.cos(), radius * a.sin(), height),
                Vector3::from(target),
                1100.0,
            )
        })
        .collect()
}

/// Projects a motion through cameras into per-view 2D keypoint sequences.
/// Mapped joints project with score 1; unmapped detector keypoints carry
/// score 0.
pub fn project_sequence(
    seq: &MotionSequence,
    topology: &SkeletonTopology,
    cameras: &[CameraModel],
) -> Vec<Vec<KeypointFrame2D>> {
    cameras
        .iter()
        .map(|cam| {
            seq.frames
                .iter()
                .map(|pose| {
                    let joints = forward_kinematics(topology, &seq.shape, pose).unwrap();
                    let mut frame = KeypointFrame2D::empty();
                    for (k, j) in topology.observed_pairs() {
                        if let Ok(uv) = cam.project(&Vector3::from(joints[j])) {
                            frame.points[k] = uv;
                            frame.scores[k] = 1.0;
                        }
                    }
                    frame
                })
                .collect()
        })
        .collect()
}

/// 3D keypoint frames holding the true joint positions of a motion.
pub fn keypoints_3d_from_fk(
    seq: &MotionSequence,
    topology: &SkeletonTopology,
) -> Vec<KeypointFrame3D> {
    seq.frames
        .iter()
        .map(|pose| {
            let joints = forward_kinematics(topology, &seq.shape, pose).unwrap();
            let mut frame = KeypointFrame3D::empty();
            for (k, j) in topology.observed_pairs() {
                frame.points[k] = joints[j];
                frame.scores[k] = 1.0;
            }
            frame
        })
        .collect()
}

/// Adds seeded Gaussian pixel noise to 2D keypoint sequences.
pub fn add_pixel_noise(views: &mut [Vec<KeypointFrame2D>], sigma: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for view in views.iter_mut() {
        for frame in view.iter_mut() {
            for (k, p) in frame.points.iter_mut().enumerate() {
                if frame.scores[k] <= 0.0 {
                    continue;
                }
                let mut gauss = || -> f64 {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                };
                p[0] += gauss();
                p[1] += gauss();
            }
        }
    }
}
