//! Fitting objectives for local pose optimization.
//!
//! The total loss is a weighted sum of four terms:
//!
//! * a keypoint term: L1 distance of posed joints to 3D targets, of their
//!   projections to 2D targets, and of the rotation parameters to the
//!   initial estimate (a motion prior);
//! * a first-order smoothness term on parameters and joint positions;
//! * a collision term on capsule pairs;
//! * a physics term penalizing ground penetration and foot skating.
//!
//! Keypoint residuals are multiplied by detector confidences. Every term has
//! an analytic gradient (checked against finite differences in the tests);
//! position gradients flow back to pose parameters through the kinematic
//! adjoint pass.

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::keypoints::{KeypointFrame2D, KeypointFrame3D};
use crate::kinematics::{fk_frame, FkFrame};
use crate::pose::{MotionSequence, PoseState, FRAME_PARAM_DIM, ROTATION_PARAM_DIM};
use crate::skeleton::{SkeletonShape, SkeletonTopology};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Weighting factors of the local fitting objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_joint: f64,
    pub lambda_smooth: f64,
    pub lambda_pen: f64,
    pub lambda_phy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_joint: 1.0,
            lambda_smooth: 0.5,
            lambda_pen: 0.1,
            lambda_phy: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_joint", self.lambda_joint),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_pen", self.lambda_pen),
            ("lambda_phy", self.lambda_phy),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!(
                    "{name} must be nonnegative and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Fitting targets: triangulated (or ingested) 3D keypoints, optional
/// multi-view 2D evidence, and the upstream parameter estimate used both as
/// initialization and as the prior.
#[derive(Debug, Clone)]
pub struct FitTargets {
    pub k3d: Vec<KeypointFrame3D>,
    pub k2d: Option<Vec<Vec<KeypointFrame2D>>>,
    pub cameras: Option<Vec<CameraModel>>,
    pub theta_init: MotionSequence,
}

impl FitTargets {
    pub fn validate(&self) -> Result<()> {
        let frames = self.theta_init.len();
        if self.k3d.len() != frames {
            return Err(Error::Structural(format!(
                "{} 3D keypoint frames for {} pose frames",
                self.k3d.len(),
                frames
            )));
        }
        match (&self.k2d, &self.cameras) {
            (Some(views), Some(cams)) => {
                if views.len() != cams.len() {
                    return Err(Error::Structural(format!(
                        "{} 2D views but {} cameras",
                        views.len(),
                        cams.len()
                    )));
                }
                for (i, v) in views.iter().enumerate() {
                    if v.len() != frames {
                        return Err(Error::Structural(format!(
                            "view {i} has {} frames, expected {frames}",
                            v.len()
                        )));
                    }
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::Structural(
                    "2D keypoints and cameras must be supplied together".into(),
                ))
            }
        }
        Ok(())
    }
}

/// Capsule collision proxy: one capsule per selected bone, plus pairs that
/// must not be tested (adjacent bones touch by construction).
#[derive(Debug, Clone)]
pub struct CollisionProxy {
    /// (child joint of the bone, capsule radius in meters).
    pub capsules: Vec<(usize, f64)>,
    /// Capsule-index pairs to skip, normalized with the smaller index first.
    pub excluded: HashSet<(usize, usize)>,
}

impl CollisionProxy {
    /// Builds a proxy from per-bone radii, excluding pairs of bones that
    /// share a joint.
    pub fn new(capsules: Vec<(usize, f64)>, topology: &SkeletonTopology) -> Result<Self> {
        for &(joint, radius) in &capsules {
            if joint >= topology.len() || topology.parent(joint).is_none() {
                return Err(Error::Validation(format!(
                    "capsule joint {joint} is not a non-root joint"
                )));
            }
            if !(radius.is_finite() && radius > 0.0) {
                return Err(Error::Validation(format!(
                    "capsule radius must be positive, got {radius}"
                )));
            }
        }
        // Adjacent bones touch by construction: exclude pairs whose joints
        // coincide or sit one tree hop apart.
        let mut excluded = HashSet::new();
        for i in 0..capsules.len() {
            for j in (i + 1)..capsules.len() {
                let ea = [topology.parent(capsules[i].0).unwrap(), capsules[i].0];
                let eb = [topology.parent(capsules[j].0).unwrap(), capsules[j].0];
                let adjacent = ea.iter().any(|&x| {
                    eb.iter().any(|&y| {
                        x == y || topology.parent(x) == Some(y) || topology.parent(y) == Some(x)
                    })
                });
                if adjacent {
                    excluded.insert((i, j));
                }
            }
        }
        Ok(Self { capsules, excluded })
    }

    fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.capsules.len();
        (0..n)
            .flat_map(move |i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(move |p| !self.excluded.contains(p))
    }
}

/// Capsules over the major limb and torso bones of the default skeleton.
pub fn default_collision_proxy(topology: &SkeletonTopology) -> Result<CollisionProxy> {
    let named = [
        ("left_knee", 0.070),
        ("right_knee", 0.070),
        ("left_ankle", 0.050),
        ("right_ankle", 0.050),
        ("left_elbow", 0.045),
        ("right_elbow", 0.045),
        ("left_wrist", 0.040),
        ("right_wrist", 0.040),
        ("spine1", 0.100),
        ("spine2", 0.100),
        ("neck", 0.100),
        ("head", 0.090),
    ];
    let capsules = named
        .iter()
        .filter_map(|(name, r)| topology.joint_index(name).map(|j| (j, *r)))
        .collect();
    CollisionProxy::new(capsules, topology)
}

// ---------------------------------------------------------------------------
// Segment-segment distance
// ---------------------------------------------------------------------------

pub(crate) struct SegmentDistance {
    pub distance: f64,
    /// Barycentric parameter of the witness point on segment a.
    pub s: f64,
    /// Barycentric parameter of the witness point on segment b.
    pub t: f64,
}

/// Minimum distance between two segments with the witness parameters.
pub(crate) fn segment_distance(
    a1: &Vector3<f64>,
    a2: &Vector3<f64>,
    b1: &Vector3<f64>,
    b2: &Vector3<f64>,
) -> SegmentDistance {
    let d1 = a2 - a1;
    let d2 = b2 - b1;
    let r = a1 - b1;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let (mut s, mut t);
    if a <= 1e-18 && e <= 1e-18 {
        s = 0.0;
        t = 0.0;
    } else if a <= 1e-18 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= 1e-18 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            s = if denom > 1e-18 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
        }
    }
    let wa = a1 + d1 * s;
    let wb = b1 + d2 * t;
    SegmentDistance {
        distance: (wa - wb).norm(),
        s,
        t,
    }
}

// ---------------------------------------------------------------------------
// Public per-term losses
// ---------------------------------------------------------------------------

/// Breakdown of the keypoint alignment loss.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct JointLoss {
    pub total: f64,
    /// Confidence-weighted L1 to the 3D targets, meters.
    pub term_3d: f64,
    /// Confidence-weighted L1 reprojection to the 2D targets, pixels.
    pub term_2d: f64,
    /// L1 distance of rotation parameters to the initial estimate, radians.
    pub term_prior: f64,
}

/// Keypoint alignment loss of a pose sequence against fit targets.
pub fn loss_joint(
    seq: &MotionSequence,
    targets: &FitTargets,
    topology: &SkeletonTopology,
) -> Result<JointLoss> {
    targets.validate()?;
    if seq.len() != targets.theta_init.len() {
        return Err(Error::Structural(format!(
            "sequence has {} frames, targets {}",
            seq.len(),
            targets.theta_init.len()
        )));
    }
    let ctx = FitContext::new(targets, topology, &LossWeights::default(), None, 0.0)?;
    let mut params = vec![0.0; seq.len() * FRAME_PARAM_DIM];
    flatten_sequence(seq, &mut params);
    let frames = fk_all(&ctx, &params, seq)?;
    Ok(ctx.joint_term(&params, &frames, None))
}

/// First-order smoothness loss (parameters + joint positions).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SmoothLoss {
    pub total: f64,
    pub param_term: f64,
    pub joint_term: f64,
    /// True when the sequence had fewer than 2 frames and the loss is 0.
    pub single_frame: bool,
}

/// Mean absolute first difference of pose parameters and of joint positions.
pub fn loss_smooth(seq: &MotionSequence, topology: &SkeletonTopology) -> Result<SmoothLoss> {
    if seq.len() < 2 {
        return Ok(SmoothLoss {
            single_frame: true,
            ..SmoothLoss::default()
        });
    }
    let mut params = vec![0.0; seq.len() * FRAME_PARAM_DIM];
    flatten_sequence(seq, &mut params);
    let fk: Vec<FkFrame> = seq
        .frames
        .iter()
        .map(|p| fk_frame(topology, &seq.shape, p))
        .collect::<Result<_>>()?;
    Ok(smooth_term(&params, &fk, topology.len(), None))
}

/// Capsule interpenetration of a single pose: sum over non-excluded capsule
/// pairs of the squared overlap depth.
pub fn loss_pen(
    pose: &PoseState,
    proxy: &CollisionProxy,
    topology: &SkeletonTopology,
    shape: &SkeletonShape,
) -> Result<f64> {
    let fk = fk_frame(topology, shape, pose)?;
    Ok(pen_from_positions(&fk.positions, proxy, topology, None))
}

/// Physical plausibility loss: ground penetration plus foot skating.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PhyLoss {
    pub total: f64,
    /// Sum of squared ground penetration depths, meters^2.
    pub penetration: f64,
    /// Sum of squared horizontal contact-frame foot speeds, (m/s)^2.
    pub skating: f64,
}

/// Ground penetration and foot-skating penalties over a sequence.
///
/// A foot joint in contact (within 5 cm of the ground at both ends of a
/// frame interval) pays for its squared horizontal speed.
pub fn loss_phy(
    seq: &MotionSequence,
    ground_height: f64,
    topology: &SkeletonTopology,
) -> Result<PhyLoss> {
    let feet = foot_joints(topology);
    let fk: Vec<FkFrame> = seq
        .frames
        .iter()
        .map(|p| fk_frame(topology, &seq.shape, p))
        .collect::<Result<_>>()?;
    Ok(phy_term(&fk, &feet, ground_height, seq.fps, None))
}

pub(crate) fn foot_joints(topology: &SkeletonTopology) -> Vec<usize> {
    ["left_ankle", "right_ankle", "left_foot", "right_foot"]
        .iter()
        .filter_map(|n| topology.joint_index(n))
        .collect()
}

/// Foot-to-ground contact threshold for the skating penalty, meters.
pub const CONTACT_THRESHOLD: f64 = 0.05;

// ---------------------------------------------------------------------------
// Combined objective with gradients
// ---------------------------------------------------------------------------

/// Per-term values of the total objective at one iterate.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub joint: JointLoss,
    pub smooth: SmoothLoss,
    pub pen: f64,
    pub phy: PhyLoss,
}

/// Everything a total-loss evaluation needs besides the parameter vector.
pub(crate) struct FitContext<'a> {
    pub topology: &'a SkeletonTopology,
    pub shape: &'a SkeletonShape,
    pub weights: LossWeights,
    pub k3d: &'a [KeypointFrame3D],
    pub views: Option<(&'a [Vec<KeypointFrame2D>], &'a [CameraModel])>,
    pub init_rotations: Vec<Vec<f64>>,
    pub template: &'a [PoseState],
    pub observed: Vec<(usize, usize)>,
    pub proxy: Option<&'a CollisionProxy>,
    pub ground_height: f64,
    pub fps: f64,
    pub foot: Vec<usize>,
    /// Count of (frame, keypoint) 3D observations with positive score.
    pub n_obs_3d: usize,
    /// Count of (frame, view, keypoint) 2D observations with positive score.
    pub n_obs_2d: usize,
}

impl<'a> FitContext<'a> {
    pub fn new(
        targets: &'a FitTargets,
        topology: &'a SkeletonTopology,
        weights: &LossWeights,
        proxy: Option<&'a CollisionProxy>,
        ground_height: f64,
    ) -> Result<Self> {
        weights.validate()?;
        targets.validate()?;
        let observed: Vec<(usize, usize)> = topology.observed_pairs().collect();
        let init_rotations = targets
            .theta_init
            .frames
            .iter()
            .map(|p| {
                let mut row = vec![0.0; ROTATION_PARAM_DIM];
                p.write_rotation_params(&mut row);
                row
            })
            .collect();
        let mut n_obs_3d = 0;
        for f in targets.k3d.iter() {
            for &(k, _) in &observed {
                if f.scores[k] > 0.0 {
                    n_obs_3d += 1;
                }
            }
        }
        let views = match (&targets.k2d, &targets.cameras) {
            (Some(v), Some(c)) => Some((v.as_slice(), c.as_slice())),
            _ => None,
        };
        let mut n_obs_2d = 0;
        if let Some((views2d, _)) = views {
            for view in views2d {
                for f in view.iter() {
                    for &(k, _) in &observed {
                        if f.scores[k] > 0.0 {
                            n_obs_2d += 1;
                        }
                    }
                }
            }
        }
        Ok(Self {
            topology,
            shape: &targets.theta_init.shape,
            weights: *weights,
            k3d: &targets.k3d,
            views,
            init_rotations,
            template: &targets.theta_init.frames,
            observed,
            proxy,
            ground_height,
            fps: targets.theta_init.fps,
            foot: foot_joints(topology),
            n_obs_3d,
            n_obs_2d,
        })
    }

    /// Keypoint loss; when `adj` is given, also accumulates position and
    /// parameter adjoints.
    fn joint_term(
        &self,
        params: &[f64],
        frames: &[FkFrame],
        mut adj: Option<&mut Adjoints>,
    ) -> JointLoss {
        let t_count = frames.len();
        let mut term_3d = 0.0;
        let mut term_2d = 0.0;
        let mut term_prior = 0.0;

        for (t, fk) in frames.iter().enumerate() {
            // 3D keypoints.
            if self.n_obs_3d > 0 {
                let target = &self.k3d[t];
                for &(k, j) in &self.observed {
                    let w = target.scores[k];
                    if w <= 0.0 {
                        continue;
                    }
                    let p = fk.positions[j];
                    let q = Vector3::from(target.points[k]);
                    let d = p - q;
                    term_3d += w * (d.x.abs() + d.y.abs() + d.z.abs());
                    if let Some(adj) = adj.as_deref_mut() {
                        let g = self.weights.lambda_joint * w / self.n_obs_3d as f64;
                        let sgn = Vector3::new(sign(d.x), sign(d.y), sign(d.z));
                        adj.positions[t][j] += sgn * g;
                    }
                }
            }
            // 2D reprojections.
            if let Some((views2d, cameras)) = self.views {
                for (view, cam) in views2d.iter().zip(cameras) {
                    let target = &view[t];
                    for &(k, j) in &self.observed {
                        let w = target.scores[k];
                        if w <= 0.0 {
                            continue;
                        }
                        let p = fk.positions[j];
                        let pc = cam.to_camera(&p);
                        if pc.z <= 1e-6 {
                            continue;
                        }
                        let inv_z = 1.0 / pc.z;
                        let u = cam.fx * pc.x * inv_z + cam.cx;
                        let v = cam.fy * pc.y * inv_z + cam.cy;
                        let du = u - target.points[k][0];
                        let dv = v - target.points[k][1];
                        term_2d += w * (du.abs() + dv.abs());
                        if let Some(adj) = adj.as_deref_mut() {
                            let g = self.weights.lambda_joint * w / self.n_obs_2d as f64;
                            let grad_u = Vector3::new(
                                cam.fx * inv_z,
                                0.0,
                                -cam.fx * pc.x * inv_z * inv_z,
                            );
                            let grad_v = Vector3::new(
                                0.0,
                                cam.fy * inv_z,
                                -cam.fy * pc.y * inv_z * inv_z,
                            );
                            let d_cam = grad_u * sign(du) + grad_v * sign(dv);
                            adj.positions[t][j] += cam.rotation().transpose() * d_cam * g;
                        }
                    }
                }
            }
            // Parameter prior on rotations.
            let init = &self.init_rotations[t];
            let base = t * FRAME_PARAM_DIM;
            let dim = ROTATION_PARAM_DIM;
            for i in 0..dim {
                let d = params[base + i] - init[i];
                term_prior += d.abs();
                if let Some(adj) = adj.as_deref_mut() {
                    adj.params[base + i] += self.weights.lambda_joint * sign(d)
                        / (t_count as f64 * dim as f64);
                }
            }
        }

        let term_3d = if self.n_obs_3d > 0 {
            term_3d / self.n_obs_3d as f64
        } else {
            0.0
        };
        let term_2d = if self.n_obs_2d > 0 {
            term_2d / self.n_obs_2d as f64
        } else {
            0.0
        };
        let term_prior = term_prior / (t_count as f64 * ROTATION_PARAM_DIM as f64);
        JointLoss {
            total: term_3d + term_2d + term_prior,
            term_3d,
            term_2d,
            term_prior,
        }
    }

    /// Full objective. Returns the weighted total, the per-term breakdown
    /// and optionally the gradient w.r.t. the flat parameter vector.
    pub fn evaluate(
        &self,
        params: &[f64],
        seq_template: &MotionSequence,
        want_grad: bool,
    ) -> Result<(f64, LossBreakdown, Option<Vec<f64>>)> {
        let t_count = self.template.len();
        debug_assert_eq!(params.len(), t_count * FRAME_PARAM_DIM);
        let frames = fk_all(self, params, seq_template)?;
        let mut adj = if want_grad {
            Some(Adjoints::new(t_count, self.topology.len()))
        } else {
            None
        };

        let mut breakdown = LossBreakdown::default();
        let w = &self.weights;
        let mut total = 0.0;

        if w.lambda_joint > 0.0 {
            let joint = self.joint_term(params, &frames, adj.as_mut());
            total += w.lambda_joint * joint.total;
            breakdown.joint = joint;
        }
        if w.lambda_smooth > 0.0 && t_count >= 2 {
            let smooth = smooth_term(
                params,
                &frames,
                self.topology.len(),
                adj.as_mut().map(|a| (a, w.lambda_smooth)),
            );
            total += w.lambda_smooth * smooth.total;
            breakdown.smooth = smooth;
        }
        if w.lambda_pen > 0.0 {
            if let Some(proxy) = self.proxy {
                let mut pen = 0.0;
                for (t, fk) in frames.iter().enumerate() {
                    pen += pen_from_positions(
                        &fk.positions,
                        proxy,
                        self.topology,
                        adj.as_mut().map(|a| {
                            (
                                &mut a.positions[t][..],
                                w.lambda_pen / t_count as f64,
                            )
                        }),
                    );
                }
                breakdown.pen = pen / t_count as f64;
                total += w.lambda_pen * breakdown.pen;
            }
        }
        if w.lambda_phy > 0.0 {
            let phy = phy_term(
                &frames,
                &self.foot,
                self.ground_height,
                self.fps,
                adj.as_mut().map(|a| (a, w.lambda_phy)),
            );
            total += w.lambda_phy * phy.total;
            breakdown.phy = phy;
        }
        breakdown.total = total;

        let grad = match adj {
            Some(mut adj) => {
                for t in 0..t_count {
                    let pose = self.template[t]
                        .from_flat(&params[t * FRAME_PARAM_DIM..(t + 1) * FRAME_PARAM_DIM]);
                    frames[t].backward(
                        self.topology,
                        self.shape,
                        &pose,
                        &adj.positions[t],
                        &mut adj.params[t * FRAME_PARAM_DIM..(t + 1) * FRAME_PARAM_DIM],
                    );
                }
                Some(std::mem::take(&mut adj.params))
            }
            None => None,
        };
        Ok((total, breakdown, grad))
    }

    /// Scans per-frame term values for the first non-finite contribution.
    pub fn diagnose_non_finite(
        &self,
        params: &[f64],
        seq_template: &MotionSequence,
    ) -> Option<(String, usize)> {
        let t_count = self.template.len();
        for t in 0..t_count {
            let pose = self.template[t]
                .from_flat(&params[t * FRAME_PARAM_DIM..(t + 1) * FRAME_PARAM_DIM]);
            let Ok(fk) = fk_frame(self.topology, self.shape, &pose) else {
                return Some(("forward kinematics".into(), t));
            };
            if fk.positions.iter().any(|p| !p.x.is_finite() || !p.y.is_finite() || !p.z.is_finite())
            {
                return Some(("forward kinematics".into(), t));
            }
            for &(k, j) in &self.observed {
                if self.k3d[t].scores[k] > 0.0 {
                    let d = fk.positions[j] - Vector3::from(self.k3d[t].points[k]);
                    if !d.norm().is_finite() {
                        return Some(("joint".into(), t));
                    }
                }
            }
        }
        None
    }
}

pub(crate) struct Adjoints {
    pub positions: Vec<Vec<Vector3<f64>>>,
    pub params: Vec<f64>,
}

impl Adjoints {
    fn new(frames: usize, joints: usize) -> Self {
        Self {
            positions: vec![vec![Vector3::zeros(); joints]; frames],
            params: vec![0.0; frames * FRAME_PARAM_DIM],
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn flatten_sequence(seq: &MotionSequence, out: &mut [f64]) {
    debug_assert_eq!(out.len(), seq.len() * FRAME_PARAM_DIM);
    for (t, pose) in seq.frames.iter().enumerate() {
        pose.write_flat(&mut out[t * FRAME_PARAM_DIM..(t + 1) * FRAME_PARAM_DIM]);
    }
}

pub(crate) fn sequence_from_flat(template: &MotionSequence, params: &[f64]) -> MotionSequence {
    let frames = template
        .frames
        .iter()
        .enumerate()
        .map(|(t, pose)| pose.from_flat(&params[t * FRAME_PARAM_DIM..(t + 1) * FRAME_PARAM_DIM]))
        .collect();
    MotionSequence {
        fps: template.fps,
        frames,
        shape: template.shape.clone(),
    }
}

fn fk_all(ctx: &FitContext, params: &[f64], template: &MotionSequence) -> Result<Vec<FkFrame>> {
    (0..template.len())
        .map(|t| {
            let pose =
                template.frames[t].from_flat(&params[t * FRAME_PARAM_DIM..(t + 1) * FRAME_PARAM_DIM]);
            fk_frame(ctx.topology, ctx.shape, &pose)
        })
        .collect()
}

fn smooth_term(
    params: &[f64],
    frames: &[FkFrame],
    joint_count: usize,
    adj: Option<(&mut Adjoints, f64)>,
) -> SmoothLoss {
    let t_count = frames.len();
    if t_count < 2 {
        return SmoothLoss {
            single_frame: true,
            ..SmoothLoss::default()
        };
    }
    let transitions = (t_count - 1) as f64;
    let param_norm = transitions * FRAME_PARAM_DIM as f64;
    let joint_norm = transitions * joint_count as f64;

    let mut param_term = 0.0;
    let mut joint_term = 0.0;
    let mut adj = adj;
    for t in 1..t_count {
        let prev = (t - 1) * FRAME_PARAM_DIM;
        let cur = t * FRAME_PARAM_DIM;
        for i in 0..FRAME_PARAM_DIM {
            let d = params[cur + i] - params[prev + i];
            param_term += d.abs();
            if let Some((adj, lambda)) = adj.as_mut() {
                let g = *lambda * sign(d) / param_norm;
                adj.params[cur + i] += g;
                adj.params[prev + i] -= g;
            }
        }
        for j in 0..joint_count {
            let d = frames[t].positions[j] - frames[t - 1].positions[j];
            joint_term += d.x.abs() + d.y.abs() + d.z.abs();
            if let Some((adj, lambda)) = adj.as_mut() {
                let g = *lambda / joint_norm;
                let sgn = Vector3::new(sign(d.x), sign(d.y), sign(d.z));
                adj.positions[t][j] += sgn * g;
                adj.positions[t - 1][j] -= sgn * g;
            }
        }
    }
    param_term /= param_norm;
    joint_term /= joint_norm;
    SmoothLoss {
        total: param_term + joint_term,
        param_term,
        joint_term,
        single_frame: false,
    }
}

/// Capsule interpenetration of one posed frame; `adj` receives scaled
/// position adjoints when provided.
fn pen_from_positions(
    positions: &[Vector3<f64>],
    proxy: &CollisionProxy,
    topology: &SkeletonTopology,
    adj: Option<(&mut [Vector3<f64>], f64)>,
) -> f64 {
    let mut total = 0.0;
    let mut adj = adj;
    for (ci, cj) in proxy.pairs() {
        let (ja, ra) = proxy.capsules[ci];
        let (jb, rb) = proxy.capsules[cj];
        let pa = topology.parent(ja).unwrap();
        let pb = topology.parent(jb).unwrap();
        let sd = segment_distance(&positions[pa], &positions[ja], &positions[pb], &positions[jb]);
        let overlap = ra + rb - sd.distance;
        if overlap <= 0.0 {
            continue;
        }
        total += overlap * overlap;
        if let Some((adj, scale)) = adj.as_mut() {
            if sd.distance > 1e-12 {
                let wa = positions[pa] * (1.0 - sd.s) + positions[ja] * sd.s;
                let wb = positions[pb] * (1.0 - sd.t) + positions[jb] * sd.t;
                let u = (wa - wb) / sd.distance;
                // d(overlap^2)/d(endpoints) with the witness parameters
                // locally constant (exact a.e. by the envelope theorem).
                let g = -2.0 * overlap * *scale;
                adj[pa] += u * (g * (1.0 - sd.s));
                adj[ja] += u * (g * sd.s);
                adj[pb] -= u * (g * (1.0 - sd.t));
                adj[jb] -= u * (g * sd.t);
            }
        }
    }
    total
}

fn phy_term(
    frames: &[FkFrame],
    foot: &[usize],
    ground: f64,
    fps: f64,
    adj: Option<(&mut Adjoints, f64)>,
) -> PhyLoss {
    let mut penetration = 0.0;
    let mut skating = 0.0;
    let mut adj = adj;
    for (t, fk) in frames.iter().enumerate() {
        for &j in foot {
            let depth = ground - fk.positions[j].z;
            if depth > 0.0 {
                penetration += depth * depth;
                if let Some((adj, lambda)) = adj.as_mut() {
                    adj.positions[t][j].z += *lambda * (-2.0 * depth);
                }
            }
        }
    }
    let fps2 = fps * fps;
    for t in 1..frames.len() {
        for &j in foot {
            let z0 = frames[t - 1].positions[j].z;
            let z1 = frames[t].positions[j].z;
            if z0 - ground > CONTACT_THRESHOLD || z1 - ground > CONTACT_THRESHOLD {
                continue;
            }
            let dx = frames[t].positions[j].x - frames[t - 1].positions[j].x;
            let dy = frames[t].positions[j].y - frames[t - 1].positions[j].y;
            skating += fps2 * (dx * dx + dy * dy);
            if let Some((adj, lambda)) = adj.as_mut() {
                let gx = *lambda * 2.0 * fps2 * dx;
                let gy = *lambda * 2.0 * fps2 * dy;
                adj.positions[t][j].x += gx;
                adj.positions[t][j].y += gy;
                adj.positions[t - 1][j].x -= gx;
                adj.positions[t - 1][j].y -= gy;
            }
        }
    }
    PhyLoss {
        total: penetration + skating,
        penetration,
        skating,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::forward_kinematics;
    use crate::skeleton::default_skeleton;
    use crate::synth::{
        camera_ring, keypoints_3d_from_fk, perturb_rotations, project_sequence,
        standing_sequence, waving_sequence, STANDING_PELVIS_HEIGHT,
    };
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn targets_from(seq: &MotionSequence, topology: &SkeletonTopology) -> FitTargets {
        FitTargets {
            k3d: keypoints_3d_from_fk(seq, topology),
            k2d: None,
            cameras: None,
            theta_init: seq.clone(),
        }
    }

    #[test]
    fn perfect_fit_has_zero_joint_loss() {
        let (topo, _) = default_skeleton();
        let seq = waving_sequence(8, 30.0);
        let targets = targets_from(&seq, &topo);
        let loss = loss_joint(&seq, &targets, &topo).unwrap();
        assert_eq!(loss.total, 0.0);
    }

    #[test]
    fn single_offset_joint_contributes_its_l1_over_observed_count() {
        let (topo, _) = default_skeleton();
        let seq = standing_sequence(1, 30.0);
        let mut targets = targets_from(&seq, &topo);
        // Move one mapped keypoint by 0.1 m in x.
        let k = topo.keypoint_for_joint(topo.joint_index("left_wrist").unwrap()).unwrap();
        targets.k3d[0].points[k][0] += 0.1;
        let observed = topo.observed_pairs().count() as f64;
        let loss = loss_joint(&seq, &targets, &topo).unwrap();
        assert_relative_eq!(loss.term_3d, 0.1 / observed, epsilon = 1e-12);
        assert_eq!(loss.term_prior, 0.0);
    }

    #[test]
    fn joint_loss_matches_naive_oracle_on_random_inputs() {
        let (topo, _) = default_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let seq = perturb_rotations(&waving_sequence(5, 30.0), 0.2, 77);
        let init = perturb_rotations(&seq, 0.1, 78);
        let mut k3d = keypoints_3d_from_fk(&waving_sequence(5, 30.0), &topo);
        for f in k3d.iter_mut() {
            for (k, p) in f.points.iter_mut().enumerate() {
                if f.scores[k] > 0.0 {
                    for x in p.iter_mut() {
                        *x += rng.gen_range(-0.2..0.2);
                    }
                    f.scores[k] = rng.gen_range(0.1..1.0);
                }
            }
        }
        let targets = FitTargets {
            k3d: k3d.clone(),
            k2d: None,
            cameras: None,
            theta_init: init.clone(),
        };
        let loss = loss_joint(&seq, &targets, &topo).unwrap();

        // Independent oracle: plain double loops over frames/keypoints.
        let mut o3 = 0.0;
        let mut count3 = 0usize;
        for (t, pose) in seq.frames.iter().enumerate() {
            let joints = forward_kinematics(&topo, &seq.shape, pose).unwrap();
            for (k, j) in topo.observed_pairs() {
                let s = k3d[t].scores[k];
                if s <= 0.0 {
                    continue;
                }
                count3 += 1;
                for a in 0..3 {
                    o3 += s * (joints[j][a] - k3d[t].points[k][a]).abs();
                }
            }
        }
        o3 /= count3 as f64;
        let mut oprior = 0.0;
        for (p, q) in seq.frames.iter().zip(&init.frames) {
            for (a, b) in p
                .theta_body
                .iter()
                .chain(p.theta_hands.iter())
                .flatten()
                .chain(p.theta_jaw.iter())
                .zip(
                    q.theta_body
                        .iter()
                        .chain(q.theta_hands.iter())
                        .flatten()
                        .chain(q.theta_jaw.iter()),
                )
            {
                oprior += (a - b).abs();
            }
        }
        oprior /= (seq.len() * ROTATION_PARAM_DIM) as f64;
        assert_relative_eq!(loss.term_3d, o3, epsilon = 1e-12);
        assert_relative_eq!(loss.term_prior, oprior, epsilon = 1e-12);
        assert_relative_eq!(loss.total, o3 + oprior, epsilon = 1e-12);
    }

    #[test]
    fn constant_sequence_has_zero_smoothness() {
        let (topo, _) = default_skeleton();
        let seq = standing_sequence(6, 30.0);
        let loss = loss_smooth(&seq, &topo).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(!loss.single_frame);
    }

    #[test]
    fn single_frame_smoothness_is_zero_with_warning() {
        let (topo, _) = default_skeleton();
        let seq = standing_sequence(1, 30.0);
        let loss = loss_smooth(&seq, &topo).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(loss.single_frame);
    }

    #[test]
    fn rigid_translation_smoothness_matches_arithmetic() {
        let (topo, _) = default_skeleton();
        let mut seq = standing_sequence(2, 30.0);
        seq.frames[1].r[0] += 0.3;
        let loss = loss_smooth(&seq, &topo).unwrap();
        assert_relative_eq!(loss.param_term, 0.3 / FRAME_PARAM_DIM as f64, epsilon = 1e-12);
        assert_relative_eq!(loss.joint_term, 0.3, epsilon = 1e-9);
    }

    #[test]
    fn smoothness_matches_naive_oracle() {
        let (topo, _) = default_skeleton();
        let seq = perturb_rotations(&waving_sequence(6, 30.0), 0.15, 91);
        let loss = loss_smooth(&seq, &topo).unwrap();
        let mut params = 0.0;
        let mut joints_term = 0.0;
        for t in 1..seq.len() {
            let mut a = vec![0.0; FRAME_PARAM_DIM];
            let mut b = vec![0.0; FRAME_PARAM_DIM];
            seq.frames[t].write_flat(&mut a);
            seq.frames[t - 1].write_flat(&mut b);
            for (x, y) in a.iter().zip(&b) {
                params += (x - y).abs();
            }
            let ja = forward_kinematics(&topo, &seq.shape, &seq.frames[t]).unwrap();
            let jb = forward_kinematics(&topo, &seq.shape, &seq.frames[t - 1]).unwrap();
            for (pa, pb) in ja.iter().zip(&jb) {
                for c in 0..3 {
                    joints_term += (pa[c] - pb[c]).abs();
                }
            }
        }
        params /= ((seq.len() - 1) * FRAME_PARAM_DIM) as f64;
        joints_term /= ((seq.len() - 1) * topo.len()) as f64;
        assert_relative_eq!(loss.param_term, params, epsilon = 1e-12);
        assert_relative_eq!(loss.joint_term, joints_term, epsilon = 1e-12);
    }

    #[test]
    fn rest_pose_with_arms_apart_has_no_penetration() {
        let (topo, shape) = default_skeleton();
        let proxy = default_collision_proxy(&topo).unwrap();
        let pose = crate::synth::standing_pose([0.0; 3]);
        assert_eq!(loss_pen(&pose, &proxy, &topo, &shape).unwrap(), 0.0);
    }

    #[test]
    fn parallel_capsule_overlap_follows_the_formula() {
        // Two parallel segments 0.06 m apart, radii 0.05: (0.04)^2 = 1.6e-3.
        let a1 = Vector3::new(0.0, 0.0, 0.0);
        let a2 = Vector3::new(0.3, 0.0, 0.0);
        let b1 = Vector3::new(0.0, 0.06, 0.0);
        let b2 = Vector3::new(0.3, 0.06, 0.0);
        let sd = segment_distance(&a1, &a2, &b1, &b2);
        let overlap = (0.05 + 0.05 - sd.distance).max(0.0);
        assert_relative_eq!(overlap * overlap, 1.6e-3, epsilon = 1e-12);
    }

    #[test]
    fn segment_distance_matches_dense_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..200 {
            let p = |rng: &mut ChaCha8Rng| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            };
            let (a1, a2, b1, b2) = (p(&mut rng), p(&mut rng), p(&mut rng), p(&mut rng));
            let sd = segment_distance(&a1, &a2, &b1, &b2);
            let mut best = f64::INFINITY;
            let steps = 200;
            for i in 0..=steps {
                let s = i as f64 / steps as f64;
                let wa = a1 + (a2 - a1) * s;
                for j in 0..=steps {
                    let t = j as f64 / steps as f64;
                    let wb = b1 + (b2 - b1) * t;
                    best = best.min((wa - wb).norm());
                }
            }
            assert!(sd.distance <= best + 1e-9, "closed form above sampled");
            assert!(best - sd.distance < 2e-2, "sampled {best}, closed {}", sd.distance);
        }
    }

    #[test]
    fn penetration_matches_brute_force_oracle_on_random_poses() {
        let (topo, shape) = default_skeleton();
        let proxy = default_collision_proxy(&topo).unwrap();
        let mut any_positive = false;
        for seed in 0..20u64 {
            let seq = perturb_rotations(&standing_sequence(1, 30.0), 0.5, seed);
            let pose = &seq.frames[0];
            let value = loss_pen(pose, &proxy, &topo, &shape).unwrap();
            let joints = forward_kinematics(&topo, &shape, pose).unwrap();
            let pos: Vec<Vector3<f64>> = joints.iter().map(|p| Vector3::from(*p)).collect();
            let mut oracle = 0.0;
            for (ci, cj) in proxy.pairs() {
                let (ja, ra) = proxy.capsules[ci];
                let (jb, rb) = proxy.capsules[cj];
                let (pa, pb) = (topo.parent(ja).unwrap(), topo.parent(jb).unwrap());
                // dense sampling distance
                let mut best = f64::INFINITY;
                let steps = 400;
                for i in 0..=steps {
                    let s = i as f64 / steps as f64;
                    let wa = pos[pa] + (pos[ja] - pos[pa]) * s;
                    for j in 0..=steps {
                        let t = j as f64 / steps as f64;
                        let wb = pos[pb] + (pos[jb] - pos[pb]) * t;
                        best = best.min((wa - wb).norm());
                    }
                }
                let overlap = (ra + rb - best).max(0.0);
                oracle += overlap * overlap;
            }
            if value > 0.0 {
                any_positive = true;
            }
            assert_relative_eq!(value, oracle, epsilon = 1e-4, max_relative = 1e-2);
        }
        assert!(any_positive, "random poses never collided; oracle untested");
    }

    #[test]
    fn feet_on_ground_standing_still_is_free() {
        let (topo, _) = default_skeleton();
        let seq = standing_sequence(5, 30.0);
        let loss = loss_phy(&seq, 0.0, &topo).unwrap();
        assert_eq!(loss.total, 0.0);
    }

    #[test]
    fn single_foot_3cm_below_ground_costs_9e4() {
        let (topo, _) = default_skeleton();
        // Lift the right leg far up so only the left toe is near the ground,
        // then set the ground 3 cm above the left toe.
        let mut seq = standing_sequence(1, 30.0);
        seq.frames[0].theta_body[2] = [-1.2, 0.0, 0.0]; // right hip flexion
        let joints = forward_kinematics(&topo, &seq.shape, &seq.frames[0]).unwrap();
        let left_foot = topo.joint_index("left_foot").unwrap();
        let left_ankle = topo.joint_index("left_ankle").unwrap();
        let toe_z = joints[left_foot][2];
        let ground = toe_z + 0.03;
        // The ankle must stay above ground for the example to hold.
        assert!(joints[left_ankle][2] > ground);
        let loss = loss_phy(&seq, ground, &topo).unwrap();
        assert_relative_eq!(loss.penetration, 9e-4, epsilon = 1e-12);
        assert_eq!(loss.skating, 0.0);
    }

    #[test]
    fn planted_feet_with_zero_velocity_do_not_skate() {
        let (topo, _) = default_skeleton();
        // Walking-like arm swing with the feet never moving horizontally.
        let mut seq = standing_sequence(12, 30.0);
        for (t, f) in seq.frames.iter_mut().enumerate() {
            f.theta_body[18] = [0.4 * (t as f64 * 0.3).sin(), 0.0, 0.0];
        }
        let loss = loss_phy(&seq, 0.0, &topo).unwrap();
        assert_eq!(loss.skating, 0.0);
        // Now slide the whole body horizontally: planted feet must pay.
        for (t, f) in seq.frames.iter_mut().enumerate() {
            f.r[0] += 0.02 * t as f64;
        }
        let sliding = loss_phy(&seq, 0.0, &topo).unwrap();
        assert!(sliding.skating > 0.0);
    }

    #[test]
    fn every_term_gradient_matches_central_differences() {
        let (topo, _) = default_skeleton();
        let cameras = camera_ring(2, 3.0, 1.2, [0.0, 0.0, 0.9]);
        let base = waving_sequence(3, 30.0);
        let proxy = default_collision_proxy(&topo).unwrap();

        // One weight configuration per term, plus the combined objective.
        let configs = [
            ("joint", LossWeights { lambda_joint: 1.0, lambda_smooth: 0.0, lambda_pen: 0.0, lambda_phy: 0.0 }),
            ("smooth", LossWeights { lambda_joint: 0.0, lambda_smooth: 1.0, lambda_pen: 0.0, lambda_phy: 0.0 }),
            ("pen", LossWeights { lambda_joint: 0.0, lambda_smooth: 0.0, lambda_pen: 1.0, lambda_phy: 0.0 }),
            ("phy", LossWeights { lambda_joint: 0.0, lambda_smooth: 0.0, lambda_pen: 0.0, lambda_phy: 1.0 }),
            ("total", LossWeights::default()),
        ];
        for (name, weights) in configs {
            let mut checked = 0;
            for seed in 0..40u64 {
                if checked >= 20 {
                    break;
                }
                // Random evaluation point near a plausible pose; large enough
                // noise to make collisions and contacts appear, and to keep
                // every L1 kink farther than the probe step away.
                let truth = crate::synth::perturb_sequence(&base, 0.25, 0.05, seed * 3 + 1);
                let point = crate::synth::perturb_sequence(&base, 0.35, 0.05, seed * 3 + 2);
                let targets = FitTargets {
                    k3d: keypoints_3d_from_fk(&truth, &topo),
                    k2d: Some(project_sequence(&truth, &topo, &cameras)),
                    cameras: Some(cameras.clone()),
                    theta_init: truth.clone(),
                };
                let ctx = FitContext::new(&targets, &topo, &weights, Some(&proxy), STANDING_PELVIS_HEIGHT - 0.88)
                    .unwrap();
                let mut x = vec![0.0; point.len() * FRAME_PARAM_DIM];
                flatten_sequence(&point, &mut x);
                let (l0, _, grad) = ctx.evaluate(&x, &truth, true).unwrap();
                if l0 == 0.0 {
                    continue;
                }
                let grad = grad.unwrap();
                let h = 1e-5;
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 999);
                // Probe a random subset of coordinates.
                let mut g_fd = Vec::new();
                let mut g_an = Vec::new();
                for _ in 0..24 {
                    let i = rng.gen_range(0..x.len());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let (lp, _, _) = ctx.evaluate(&xp, &truth, false).unwrap();
                    let (lm, _, _) = ctx.evaluate(&xm, &truth, false).unwrap();
                    g_fd.push((lp - lm) / (2.0 * h));
                    g_an.push(grad[i]);
                }
                let norm_fd: f64 = g_fd.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm_fd < 1e-10 {
                    continue;
                }
                let diff: f64 = g_fd
                    .iter()
                    .zip(&g_an)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(
                    diff / norm_fd < 1e-4,
                    "{name}: gradient mismatch {diff} vs norm {norm_fd} at seed {seed}"
                );
                checked += 1;
            }
            assert!(checked >= 10, "{name}: not enough valid gradient probes ({checked})");
        }
    }
}
