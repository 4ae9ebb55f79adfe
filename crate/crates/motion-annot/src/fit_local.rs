//! Local pose optimization: fits a pose sequence to keypoint targets.
//!
//! Starting from the ingested parameter estimate, gradient descent with a
//! backtracking line search minimizes the weighted objective from
//! [`crate::losses`] over every frame's rotations and translation. Steps are
//! only accepted when the loss does not increase; iteration stops when the
//! relative decrease falls below the tolerance or the budget runs out.

use crate::error::{Error, Result};
use crate::losses::{
    flatten_sequence, sequence_from_flat, CollisionProxy, FitContext, FitTargets, LossBreakdown,
    LossWeights,
};
use crate::optim::{minimize, GdOptions};
use crate::pose::{MotionSequence, FRAME_PARAM_DIM};
use crate::skeleton::SkeletonTopology;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub init_step: f64,
    /// Ground plane height for the physics term, meters.
    pub ground_height: f64,
    /// Collision capsules; required when `lambda_pen > 0`.
    pub proxy: Option<CollisionProxy>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-6,
            init_step: 1e-2,
            ground_height: 0.0,
            proxy: None,
        }
    }
}

/// One accepted optimizer iterate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total: f64,
    pub joint: f64,
    pub smooth: f64,
    pub pen: f64,
    pub phy: f64,
    pub step: f64,
}

/// Convergence report with the per-term loss trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_breakdown: LossBreakdown,
    pub warnings: Vec<String>,
}

/// Fits the pose sequence to the targets by minimizing the weighted local
/// objective. Returns the refined sequence and the convergence report.
pub fn fit_local(
    targets: &FitTargets,
    weights: &LossWeights,
    topology: &SkeletonTopology,
    opts: &FitOptions,
) -> Result<(MotionSequence, FitReport)> {
    weights.validate()?;
    targets.validate()?;
    if weights.lambda_pen > 0.0 && opts.proxy.is_none() {
        return Err(Error::Validation(
            "lambda_pen > 0 requires a collision proxy".into(),
        ));
    }
    let ctx = FitContext::new(
        targets,
        topology,
        weights,
        opts.proxy.as_ref(),
        opts.ground_height,
    )?;
    let template = &targets.theta_init;
    let mut x0 = vec![0.0; template.len() * FRAME_PARAM_DIM];
    flatten_sequence(template, &mut x0);

    let mut records: Vec<IterationRecord> = Vec::new();
    let mut final_breakdown = LossBreakdown::default();
    let gd = GdOptions {
        max_iters: opts.max_iters,
        rel_tol: opts.rel_tol,
        init_step: opts.init_step,
        ..GdOptions::default()
    };
    let outcome = minimize(
        x0,
        &gd,
        |x, want_grad| {
            let (loss, breakdown, grad) = ctx.evaluate(x, template, want_grad)?;
            if !loss.is_finite() {
                let (term, frame) = ctx
                    .diagnose_non_finite(x, template)
                    .unwrap_or(("total".into(), 0));
                return Err(Error::NonFinite { term, frame });
            }
            if let Some(g) = &grad {
                if g.iter().any(|v| !v.is_finite()) {
                    let (term, frame) = ctx
                        .diagnose_non_finite(x, template)
                        .unwrap_or(("gradient".into(), 0));
                    return Err(Error::NonFinite { term, frame });
                }
            }
            Ok((loss, breakdown, grad))
        },
        |iter, total, breakdown: &LossBreakdown, step| {
            final_breakdown = *breakdown;
            records.push(IterationRecord {
                iteration: iter,
                total,
                joint: breakdown.joint.total,
                smooth: breakdown.smooth.total,
                pen: breakdown.pen,
                phy: breakdown.phy.total,
                step,
            });
        },
    )?;

    let refined = sequence_from_flat(template, &outcome.x);
    let mut warnings = Vec::new();
    if !outcome.converged {
        warnings.push(format!(
            "stopped after {} iterations before reaching rel_tol {}",
            outcome.iterations, opts.rel_tol
        ));
    }
    if template.len() < 2 && weights.lambda_smooth > 0.0 {
        warnings.push("single-frame sequence: smoothness term is zero".into());
    }
    let report = FitReport {
        initial_loss: records.first().map_or(0.0, |r| r.total),
        final_loss: records.last().map_or(0.0, |r| r.total),
        converged: outcome.converged,
        iterations: records,
        final_breakdown,
        warnings,
    };
    Ok((refined, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::forward_kinematics;
    use crate::losses::default_collision_proxy;
    use crate::skeleton::default_skeleton;
    use crate::synth::{
        camera_ring, keypoints_3d_from_fk, perturb_rotations, project_sequence,
        standing_sequence, waving_sequence,
    };

    fn mpjpe_mm(
        a: &MotionSequence,
        b: &MotionSequence,
        topology: &SkeletonTopology,
    ) -> f64 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for (pa, pb) in a.frames.iter().zip(&b.frames) {
            let ja = forward_kinematics(topology, &a.shape, pa).unwrap();
            let jb = forward_kinematics(topology, &b.shape, pb).unwrap();
            for (x, y) in ja.iter().zip(&jb) {
                let d = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2))
                    .sqrt();
                acc += d;
                count += 1;
            }
        }
        1000.0 * acc / count as f64
    }

    #[test]
    fn truth_targets_are_a_fixed_point() {
        let (topo, _) = default_skeleton();
        let truth = standing_sequence(4, 30.0);
        let targets = FitTargets {
            k3d: keypoints_3d_from_fk(&truth, &topo),
            k2d: None,
            cameras: None,
            theta_init: truth.clone(),
        };
        let weights = LossWeights {
            lambda_pen: 0.0,
            lambda_phy: 0.0,
            ..LossWeights::default()
        };
        let (fitted, report) =
            fit_local(&targets, &weights, &topo, &FitOptions::default()).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations.len(), 1, "converged at iteration 0");
        assert!(report.final_loss.abs() < 1e-12);
        assert_eq!(fitted.frames, truth.frames);
    }

    #[test]
    fn perturbed_init_recovers_below_5mm_mpjpe() {
        let (topo, _) = default_skeleton();
        let truth = waving_sequence(10, 30.0);
        let init = crate::synth::perturb_rotations_by_angle(&truth, 0.05, 4242);
        let targets = FitTargets {
            k3d: keypoints_3d_from_fk(&truth, &topo),
            k2d: None,
            cameras: None,
            theta_init: init.clone(),
        };
        let weights = LossWeights {
            lambda_pen: 0.0,
            lambda_phy: 0.0,
            ..LossWeights::default()
        };
        let opts = FitOptions {
            max_iters: 3000,
            rel_tol: 1e-8,
            ..FitOptions::default()
        };
        let before = mpjpe_mm(&init, &truth, &topo);
        let (fitted, report) = fit_local(&targets, &weights, &topo, &opts).unwrap();
        let after = mpjpe_mm(&fitted, &truth, &topo);
        println!("mpjpe before {before:.3} mm, after {after:.3} mm, iters {}", report.iterations.len());
        for pair in report.iterations.windows(2) {
            assert!(pair[1].total <= pair[0].total);
        }
        assert!(report.final_loss <= report.initial_loss);
        assert!(after < 5.0, "recovered MPJPE {after} mm");
    }

    #[test]
    fn total_loss_at_result_never_exceeds_init() {
        let (topo, _) = default_skeleton();
        let truth = waving_sequence(6, 30.0);
        let init = perturb_rotations(&truth, 0.08, 7);
        let cameras = camera_ring(2, 3.0, 1.2, [0.0, 0.0, 0.9]);
        let targets = FitTargets {
            k3d: keypoints_3d_from_fk(&truth, &topo),
            k2d: Some(project_sequence(&truth, &topo, &cameras)),
            cameras: Some(cameras),
            theta_init: init,
        };
        let opts = FitOptions {
            max_iters: 40,
            proxy: Some(default_collision_proxy(&topo).unwrap()),
            ..FitOptions::default()
        };
        let (_, report) = fit_local(&targets, &LossWeights::default(), &topo, &opts).unwrap();
        assert!(report.final_loss <= report.initial_loss);
    }

    #[test]
    fn zero_weight_matches_removed_term_bitwise() {
        let (topo, _) = default_skeleton();
        let truth = waving_sequence(5, 30.0);
        let init = perturb_rotations(&truth, 0.05, 99);
        let targets = FitTargets {
            k3d: keypoints_3d_from_fk(&truth, &topo),
            k2d: None,
            cameras: None,
            theta_init: init,
        };
        // lambda_pen = 0 with a proxy present must match no proxy at all.
        let weights = LossWeights {
            lambda_pen: 0.0,
            lambda_phy: 0.0,
            ..LossWeights::default()
        };
        let opts_with = FitOptions {
            max_iters: 30,
            proxy: Some(default_collision_proxy(&topo).unwrap()),
            ..FitOptions::default()
        };
        let opts_without = FitOptions {
            max_iters: 30,
            proxy: None,
            ..FitOptions::default()
        };
        let (a, ra) = fit_local(&targets, &weights, &topo, &opts_with).unwrap();
        let (b, rb) = fit_local(&targets, &weights, &topo, &opts_without).unwrap();
        assert_eq!(a.frames, b.frames);
        let ta: Vec<f64> = ra.iterations.iter().map(|r| r.total).collect();
        let tb: Vec<f64> = rb.iterations.iter().map(|r| r.total).collect();
        assert_eq!(ta, tb, "loss trajectories must be bitwise equal");
    }

    #[test]
    fn missing_proxy_with_positive_pen_weight_is_rejected() {
        let (topo, _) = default_skeleton();
        let truth = standing_sequence(2, 30.0);
        let targets = FitTargets {
            k3d: keypoints_3d_from_fk(&truth, &topo),
            k2d: None,
            cameras: None,
            theta_init: truth,
        };
        let err = fit_local(
            &targets,
            &LossWeights::default(),
            &topo,
            &FitOptions::default(),
        );
        assert!(err.is_err());
    }
}
