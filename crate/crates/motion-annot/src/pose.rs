//! Parametric pose state and motion sequences.
//!
//! A pose is the tuple of body rotations (22x3 axis-angle, the first entry
//! being the global root orientation), hand rotations (30x3), jaw rotation,
//! expression coefficients (carried opaquely), and global translation.

use crate::error::{Error, Result};
use crate::rotation::canonicalize_axis_angle;
use crate::skeleton::{SkeletonShape, BODY_JOINT_COUNT, HAND_JOINT_COUNT, JOINT_COUNT};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Expression coefficient count (carried but not geometrically realized).
pub const EXPRESSION_DIM: usize = 50;
/// Rotation parameters per frame: body + hands + jaw.
pub const ROTATION_PARAM_DIM: usize = (BODY_JOINT_COUNT + 2 * HAND_JOINT_COUNT + 1) * 3;
/// Free parameters per frame during fitting: rotations plus translation.
pub const FRAME_PARAM_DIM: usize = ROTATION_PARAM_DIM + 3;

/// Per-frame parametric pose.
///
/// Constructors canonicalize every axis-angle vector into magnitude
/// `[0, pi]` and reject non-finite input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseState {
    pub theta_body: [[f64; 3]; BODY_JOINT_COUNT],
    pub theta_hands: [[f64; 3]; 2 * HAND_JOINT_COUNT],
    pub theta_jaw: [f64; 3],
    pub psi: Vec<f64>,
    pub r: [f64; 3],
}

impl PoseState {
    pub fn new(
        theta_body: [[f64; 3]; BODY_JOINT_COUNT],
        theta_hands: [[f64; 3]; 2 * HAND_JOINT_COUNT],
        theta_jaw: [f64; 3],
        psi: Vec<f64>,
        r: [f64; 3],
    ) -> Result<Self> {
        let pose = Self {
            theta_body,
            theta_hands,
            theta_jaw,
            psi,
            r,
        };
        pose.validate_finite()?;
        Ok(canonicalize_pose_unchecked(&pose))
    }

    /// Identity pose at the origin with zeroed expression.
    pub fn rest() -> Self {
        Self {
            theta_body: [[0.0; 3]; BODY_JOINT_COUNT],
            theta_hands: [[0.0; 3]; 2 * HAND_JOINT_COUNT],
            theta_jaw: [0.0; 3],
            psi: vec![0.0; EXPRESSION_DIM],
            r: [0.0; 3],
        }
    }

    fn validate_finite(&self) -> Result<()> {
        let all = self
            .theta_body
            .iter()
            .chain(self.theta_hands.iter())
            .flatten()
            .chain(self.theta_jaw.iter())
            .chain(self.psi.iter())
            .chain(self.r.iter());
        for &x in all {
            if !x.is_finite() {
                return Err(Error::Validation("pose contains a non-finite value".into()));
            }
        }
        Ok(())
    }

    /// Local axis-angle rotation of a joint, indexed in skeleton order
    /// (body, left hand, right hand, jaw).
    pub fn joint_rotation(&self, joint: usize) -> Vector3<f64> {
        let a = if joint < BODY_JOINT_COUNT {
            &self.theta_body[joint]
        } else if joint < BODY_JOINT_COUNT + 2 * HAND_JOINT_COUNT {
            &self.theta_hands[joint - BODY_JOINT_COUNT]
        } else {
            debug_assert_eq!(joint, JOINT_COUNT - 1);
            &self.theta_jaw
        };
        Vector3::new(a[0], a[1], a[2])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.r[0], self.r[1], self.r[2])
    }

    /// Rotation parameters (body, hands, jaw) flattened in joint order.
    pub(crate) fn write_rotation_params(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), ROTATION_PARAM_DIM);
        let mut i = 0;
        for a in self.theta_body.iter().chain(self.theta_hands.iter()) {
            out[i..i + 3].copy_from_slice(a);
            i += 3;
        }
        out[i..i + 3].copy_from_slice(&self.theta_jaw);
    }

    /// Rebuilds a pose from flattened rotation params + translation,
    /// keeping this pose's expression coefficients.
    pub(crate) fn from_flat(&self, params: &[f64]) -> Self {
        debug_assert_eq!(params.len(), FRAME_PARAM_DIM);
        let mut pose = self.clone();
        let mut i = 0;
        for a in pose
            .theta_body
            .iter_mut()
            .chain(pose.theta_hands.iter_mut())
        {
            a.copy_from_slice(&params[i..i + 3]);
            i += 3;
        }
        pose.theta_jaw.copy_from_slice(&params[i..i + 3]);
        i += 3;
        pose.r.copy_from_slice(&params[i..i + 3]);
        pose
    }

    pub(crate) fn write_flat(&self, out: &mut [f64]) {
        self.write_rotation_params(&mut out[..ROTATION_PARAM_DIM]);
        out[ROTATION_PARAM_DIM..FRAME_PARAM_DIM].copy_from_slice(&self.r);
    }
}

fn canonicalize_pose_unchecked(pose: &PoseState) -> PoseState {
    let wrap = |a: &[f64; 3]| -> [f64; 3] {
        let w = canonicalize_axis_angle(&Vector3::new(a[0], a[1], a[2]));
        [w.x, w.y, w.z]
    };
    let mut out = pose.clone();
    for a in out.theta_body.iter_mut().chain(out.theta_hands.iter_mut()) {
        *a = wrap(a);
    }
    out.theta_jaw = wrap(&out.theta_jaw);
    out
}

/// Wraps every axis-angle vector of the pose into magnitude `[0, pi]`.
/// The represented rotations are unchanged.
pub fn canonicalize_pose(pose: &PoseState) -> Result<PoseState> {
    pose.validate_finite()?;
    Ok(canonicalize_pose_unchecked(pose))
}

/// A timed sequence of poses sharing one skeleton shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub fps: f64,
    pub frames: Vec<PoseState>,
    pub shape: SkeletonShape,
}

impl MotionSequence {
    pub fn new(fps: f64, frames: Vec<PoseState>, shape: SkeletonShape) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Validation(format!("fps must be positive, got {fps}")));
        }
        if frames.is_empty() {
            return Err(Error::Validation("motion sequence must be nonempty".into()));
        }
        Ok(Self { fps, frames, shape })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
