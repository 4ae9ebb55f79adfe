//! Forward kinematics over the skeleton tree, with reverse-mode adjoints.
//!
//! The root sits at the pose translation; each child joint is placed at
//! `parent + orient(parent) * rest_direction * bone_length`, where
//! `orient(parent)` composes the local rotations from the root down to the
//! parent joint. The adjoint pass turns gradients on joint positions into
//! gradients on the pose parameters, which is what the fitting losses need.

use crate::error::{Error, Result};
use crate::pose::{PoseState, FRAME_PARAM_DIM, ROTATION_PARAM_DIM};
use crate::rotation::{rotation_matrix, rotation_with_derivatives};
use crate::skeleton::{SkeletonShape, SkeletonTopology, JOINT_COUNT};
use nalgebra::{Matrix3, Vector3};

/// Full kinematic state of one posed frame.
#[derive(Debug, Clone)]
pub struct FkFrame {
    pub positions: Vec<Vector3<f64>>,
    pub orientations: Vec<Matrix3<f64>>,
    local_rotations: Vec<Matrix3<f64>>,
}

fn check_dimensions(topology: &SkeletonTopology, shape: &SkeletonShape) -> Result<()> {
    if topology.len() != JOINT_COUNT {
        return Err(Error::Structural(format!(
            "pose parameterization covers {JOINT_COUNT} joints but topology has {}",
            topology.len()
        )));
    }
    if shape.bone_lengths().len() != topology.len() {
        return Err(Error::Structural(format!(
            "shape has {} bone lengths for {} joints",
            shape.bone_lengths().len(),
            topology.len()
        )));
    }
    Ok(())
}

/// Poses the skeleton and returns every joint's kinematic state.
pub fn fk_frame(
    topology: &SkeletonTopology,
    shape: &SkeletonShape,
    pose: &PoseState,
) -> Result<FkFrame> {
    check_dimensions(topology, shape)?;
    let n = topology.len();
    let mut positions = vec![Vector3::zeros(); n];
    let mut orientations = vec![Matrix3::identity(); n];
    let mut local_rotations = vec![Matrix3::identity(); n];
    for &j in topology.topological_order() {
        let local = rotation_matrix(&pose.joint_rotation(j));
        local_rotations[j] = local;
        match topology.parent(j) {
            None => {
                positions[j] = pose.translation();
                orientations[j] = local;
            }
            Some(p) => {
                let dir = topology.rest_direction(j).expect("non-root has direction");
                positions[j] = positions[p] + orientations[p] * (dir * shape.bone_length(j));
                orientations[j] = orientations[p] * local;
            }
        }
    }
    Ok(FkFrame {
        positions,
        orientations,
        local_rotations,
    })
}

/// Joint positions (53 x 3, meters) for a posed skeleton.
pub fn forward_kinematics(
    topology: &SkeletonTopology,
    shape: &SkeletonShape,
    pose: &PoseState,
) -> Result<Vec<[f64; 3]>> {
    let frame = fk_frame(topology, shape, pose)?;
    Ok(frame
        .positions
        .iter()
        .map(|p| [p.x, p.y, p.z])
        .collect())
}

/// Joint positions for every frame of a sequence.
pub fn forward_kinematics_sequence(
    topology: &SkeletonTopology,
    shape: &SkeletonShape,
    frames: &[PoseState],
) -> Result<Vec<Vec<[f64; 3]>>> {
    frames
        .iter()
        .map(|pose| forward_kinematics(topology, shape, pose))
        .collect()
}

impl FkFrame {
    /// Reverse-mode pass: converts per-joint position adjoints dL/dp into
    /// parameter gradients, accumulated into `grad` (layout: rotations in
    /// joint order, then translation; see [`FRAME_PARAM_DIM`]).
    pub(crate) fn backward(
        &self,
        topology: &SkeletonTopology,
        shape: &SkeletonShape,
        pose: &PoseState,
        adj_positions: &[Vector3<f64>],
        grad: &mut [f64],
    ) {
        debug_assert_eq!(grad.len(), FRAME_PARAM_DIM);
        let n = topology.len();
        let mut adj_p = adj_positions.to_vec();
        let mut adj_o = vec![Matrix3::<f64>::zeros(); n];
        for &j in topology.topological_order().iter().rev() {
            match topology.parent(j) {
                Some(p) => {
                    let dir = topology.rest_direction(j).expect("non-root has direction");
                    let offset = dir * shape.bone_length(j);
                    let adj_pj = adj_p[j];
                    let adj_oj = adj_o[j];
                    adj_p[p] += adj_pj;
                    adj_o[p] += adj_pj * offset.transpose();
                    adj_o[p] += adj_oj * self.local_rotations[j].transpose();
                    let adj_local = self.orientations[p].transpose() * adj_oj;
                    accumulate_rotation_grad(pose, j, &adj_local, grad);
                }
                None => {
                    // Root: position is the translation, orientation is the
                    // root rotation itself.
                    let adj_local = adj_o[j];
                    accumulate_rotation_grad(pose, j, &adj_local, grad);
                    for k in 0..3 {
                        grad[ROTATION_PARAM_DIM + k] += adj_p[j][k];
                    }
                }
            }
        }
    }
}

fn accumulate_rotation_grad(
    pose: &PoseState,
    joint: usize,
    adj_local: &Matrix3<f64>,
    grad: &mut [f64],
) {
    if adj_local.abs().max() == 0.0 {
        return;
    }
    let v = pose.joint_rotation(joint);
    let (_, derivs) = rotation_with_derivatives(&v);
    let base = joint * 3;
    for i in 0..3 {
        grad[base + i] += derivs[i].component_mul(adj_local).sum();
    }
}
