//! Confidence-weighted multi-view triangulation.
//!
//! Points are solved linearly (weighted DLT on the projection matrices) and
//! polished with a few Gauss-Newton steps on the weighted reprojection error.
//! Sequence-level triangulation additionally smooths the recovered 3D series
//! and projects bone lengths to a single per-sequence value so the skeleton
//! does not stretch over time.

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::filter::{smooth_sequence_3d, FilterSpec};
use crate::keypoints::{KeypointFrame2D, KeypointFrame3D};
use crate::skeleton::{SkeletonShape, SkeletonTopology, KEYPOINT_COUNT};
use nalgebra::{DMatrix, Matrix3, Vector3};

/// One 2D observation of a point.
#[derive(Debug, Clone)]
pub struct Observation2D<'a> {
    pub camera: &'a CameraModel,
    pub uv: [f64; 2],
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct TriangulationOptions {
    /// Observations below this confidence are ignored.
    pub score_floor: f64,
    /// Gauss-Newton polish iterations after the linear solve.
    pub max_refine_iters: usize,
    /// Condition-number limit on the refinement normal matrix.
    pub condition_limit: f64,
    /// Temporal smoothing applied to the triangulated series.
    pub filter: FilterSpec,
    /// Whether to project bone lengths to their per-sequence value.
    pub enforce_bone_lengths: bool,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        Self {
            score_floor: 0.3,
            max_refine_iters: 10,
            condition_limit: 1e10,
            filter: FilterSpec::default(),
            enforce_bone_lengths: true,
        }
    }
}

/// Triangulated point with its fit quality.
#[derive(Debug, Clone, Copy)]
pub struct TriangulatedPoint {
    pub point: [f64; 3],
    /// RMS reprojection residual over the used observations, pixels.
    pub rms_residual_px: f64,
}

/// Recovers a 3D point from two or more confidence-weighted observations.
pub fn triangulate_point(
    observations: &[Observation2D<'_>],
    opts: &TriangulationOptions,
) -> Result<TriangulatedPoint> {
    let usable: Vec<&Observation2D> = observations
        .iter()
        .filter(|o| o.score >= opts.score_floor)
        .collect();
    if usable.len() < 2 {
        return Err(Error::Underdetermined {
            usable: usable.len(),
        });
    }

    // Weighted DLT on homogeneous coordinates.
    let mut a = DMatrix::<f64>::zeros(2 * usable.len(), 4);
    for (i, obs) in usable.iter().enumerate() {
        let p = obs.camera.projection_matrix();
        let w = obs.score;
        let row2 = p.row(2);
        for col in 0..4 {
            a[(2 * i, col)] = w * (obs.uv[0] * row2[col] - p.row(0)[col]);
            a[(2 * i + 1, col)] = w * (obs.uv[1] * row2[col] - p.row(1)[col]);
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| {
        Error::DegenerateGeometry("SVD failed during triangulation".into())
    })?;
    let h = v_t.row(v_t.nrows() - 1);
    if h[3].abs() < 1e-14 {
        return Err(Error::DegenerateGeometry(
            "triangulated point at infinity".into(),
        ));
    }
    let mut point = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    // Gauss-Newton polish of the weighted reprojection error.
    let mut cost = weighted_cost(&point, &usable);
    for _ in 0..opts.max_refine_iters {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        let mut any = false;
        for obs in &usable {
            let pc = obs.camera.to_camera(&point);
            if pc.z <= 1e-6 {
                continue;
            }
            any = true;
            let (fx, fy) = (obs.camera.fx, obs.camera.fy);
            let inv_z = 1.0 / pc.z;
            // d(u,v)/d(camera point)
            let du = Vector3::new(fx * inv_z, 0.0, -fx * pc.x * inv_z * inv_z);
            let dv = Vector3::new(0.0, fy * inv_z, -fy * pc.y * inv_z * inv_z);
            let rt = obs.camera.rotation().transpose();
            let ju = rt * du;
            let jv = rt * dv;
            let u = fx * pc.x * inv_z + obs.camera.cx;
            let v = fy * pc.y * inv_z + obs.camera.cy;
            let w = obs.score * obs.score;
            let ru = u - obs.uv[0];
            let rv = v - obs.uv[1];
            jtj += (ju * ju.transpose() + jv * jv.transpose()) * w;
            jtr += (ju * ru + jv * rv) * w;
        }
        if !any {
            return Err(Error::DegenerateGeometry(
                "point moved behind all cameras during refinement".into(),
            ));
        }
        let svd3 = jtj.svd(false, false);
        let smax = svd3.singular_values[0];
        let smin = svd3.singular_values[2];
        if smin <= 0.0 || smax / smin > opts.condition_limit {
            return Err(Error::DegenerateGeometry(format!(
                "observation geometry is ill-conditioned (condition {:.3e})",
                if smin > 0.0 { smax / smin } else { f64::INFINITY }
            )));
        }
        let step = jtj
            .lu()
            .solve(&jtr)
            .ok_or_else(|| Error::DegenerateGeometry("singular normal matrix".into()))?;
        if step.norm() < 1e-14 {
            break;
        }
        // Halve the step until the weighted cost does not increase.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let candidate = point - step * alpha;
            let c = weighted_cost(&candidate, &usable);
            if c <= cost {
                point = candidate;
                cost = c;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let mut rss = 0.0;
    let mut count = 0usize;
    for obs in &usable {
        if let Ok(uv) = obs.camera.project(&point) {
            rss += (uv[0] - obs.uv[0]).powi(2) + (uv[1] - obs.uv[1]).powi(2);
            count += 1;
        }
    }
    let rms = if count > 0 {
        (rss / count as f64).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(TriangulatedPoint {
        point: [point.x, point.y, point.z],
        rms_residual_px: rms,
    })
}

fn weighted_cost(point: &Vector3<f64>, obs: &[&Observation2D<'_>]) -> f64 {
    let mut acc = 0.0;
    for o in obs {
        match o.camera.project(point) {
            Ok(uv) => {
                acc += o.score
                    * o.score
                    * ((uv[0] - o.uv[0]).powi(2) + (uv[1] - o.uv[1]).powi(2));
            }
            Err(_) => acc += 1e12,
        }
    }
    acc
}

/// Summary statistics from sequence triangulation, for review reports.
#[derive(Debug, Clone, Default)]
pub struct TriangulationStats {
    pub mean_rms_px: f64,
    pub max_rms_px: f64,
    /// Keypoint-frames that failed to triangulate and were held.
    pub held: usize,
}

/// Triangulates a time-aligned multi-view keypoint sequence.
///
/// Per frame and keypoint, usable views are triangulated and scored with the
/// harmonic mean of the contributing 2D confidences; failures hold the last
/// valid position with score 0. The recovered series is then temporally
/// smoothed, and mapped bones are projected root-outward so every bone keeps
/// one length across the whole sequence (the shape prior length when given,
/// otherwise the per-sequence median).
pub fn triangulate_sequence(
    views: &[Vec<KeypointFrame2D>],
    cameras: &[CameraModel],
    topology: &SkeletonTopology,
    shape_prior: Option<&SkeletonShape>,
    opts: &TriangulationOptions,
) -> Result<(Vec<KeypointFrame3D>, TriangulationStats)> {
    if views.len() != cameras.len() {
        return Err(Error::Structural(format!(
            "{} views but {} cameras",
            views.len(),
            cameras.len()
        )));
    }
    if views.is_empty() {
        return Err(Error::Validation("no views to triangulate".into()));
    }
    let frames = views[0].len();
    if views.iter().any(|v| v.len() != frames) {
        return Err(Error::Structural(
            "views must be time-aligned with equal frame counts".into(),
        ));
    }
    if frames == 0 {
        return Err(Error::Validation("empty keypoint sequence".into()));
    }

    let mut out: Vec<KeypointFrame3D> = Vec::with_capacity(frames);
    let mut stats = TriangulationStats::default();
    let mut rms_acc = 0.0;
    let mut rms_count = 0usize;
    let mut last_valid: Vec<Option<[f64; 3]>> = vec![None; KEYPOINT_COUNT];
    for t in 0..frames {
        let mut frame = KeypointFrame3D::empty();
        for k in 0..KEYPOINT_COUNT {
            let observations: Vec<Observation2D> = views
                .iter()
                .zip(cameras)
                .map(|(v, cam)| Observation2D {
                    camera: cam,
                    uv: v[t].points[k],
                    score: v[t].scores[k],
                })
                .filter(|o| o.score >= opts.score_floor)
                .collect();
            match triangulate_point(&observations, opts) {
                Ok(tri) => {
                    let inv_sum: f64 = observations.iter().map(|o| 1.0 / o.score).sum();
                    frame.points[k] = tri.point;
                    frame.scores[k] = observations.len() as f64 / inv_sum;
                    last_valid[k] = Some(tri.point);
                    rms_acc += tri.rms_residual_px;
                    rms_count += 1;
                    stats.max_rms_px = stats.max_rms_px.max(tri.rms_residual_px);
                }
                Err(_) => {
                    frame.points[k] = last_valid[k].unwrap_or([0.0; 3]);
                    frame.scores[k] = 0.0;
                    stats.held += 1;
                }
            }
        }
        out.push(frame);
    }
    if rms_count > 0 {
        stats.mean_rms_px = rms_acc / rms_count as f64;
    }

    // Temporal smoothing; sequences shorter than the smallest window are
    // passed through unsmoothed (a single frame is a valid input here).
    if frames >= opts.filter.min_sequence_len() {
        out = smooth_sequence_3d(&out, &opts.filter)?;
    }

    if opts.enforce_bone_lengths {
        enforce_bone_lengths(&mut out, topology, shape_prior);
    }
    Ok((out, stats))
}

/// Projects every mapped bone to a single length: the shape prior length when
/// provided, otherwise the median observed length over the sequence. Joints
/// are visited root-outward so each child is re-anchored to its already
/// adjusted parent along the current bone direction.
fn enforce_bone_lengths(
    frames: &mut [KeypointFrame3D],
    topology: &SkeletonTopology,
    shape_prior: Option<&SkeletonShape>,
) {
    // Mapped bones: both the joint and its parent have detector keypoints.
    let bones: Vec<(usize, usize, usize)> = topology
        .topological_order()
        .iter()
        .filter_map(|&j| {
            let p = topology.parent(j)?;
            let kj = topology.keypoint_for_joint(j)?;
            let kp = topology.keypoint_for_joint(p)?;
            Some((j, kj, kp))
        })
        .collect();

    for &(j, kj, kp) in &bones {
        let target = match shape_prior {
            Some(shape) => Some(shape.bone_length(j)),
            None => {
                let mut lengths: Vec<f64> = frames
                    .iter()
                    .filter(|f| f.scores[kj] > 0.0 && f.scores[kp] > 0.0)
                    .map(|f| dist(f.points[kj], f.points[kp]))
                    .collect();
                if lengths.is_empty() {
                    None
                } else {
                    lengths.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    Some(median_of_sorted(&lengths))
                }
            }
        };
        let Some(target) = target else { continue };
        for f in frames.iter_mut() {
            let parent = Vector3::from(f.points[kp]);
            let child = Vector3::from(f.points[kj]);
            let dir = child - parent;
            let norm = dir.norm();
            if norm < 1e-12 {
                continue;
            }
            let fixed = parent + dir * (target / norm);
            f.points[kj] = [fixed.x, fixed.y, fixed.z];
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (Vector3::from(a) - Vector3::from(b)).norm()
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
