//! Bundle adjustment: joint refinement of camera extrinsics and track points.
//!
//! Levenberg-Marquardt on the weighted reprojection error with the first
//! camera held fixed as gauge. The scale gauge (which reprojection cannot
//! see) is pinned by rescaling the solution about the first camera center so
//! the first baseline keeps its initial length; this leaves every residual
//! bit-identical.

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::rotation::{log_rotation, rotation_with_derivatives};
use crate::triangulation::{triangulate_point, Observation2D, TriangulationOptions};
use nalgebra::{DMatrix, DVector, Vector3};

/// One 2D sighting of a track.
#[derive(Debug, Clone)]
pub struct TrackObservation {
    pub camera: usize,
    pub uv: [f64; 2],
    pub score: f64,
}

/// A single scene point observed in two or more cameras.
#[derive(Debug, Clone)]
pub struct Track {
    pub observations: Vec<TrackObservation>,
}

#[derive(Debug, Clone)]
pub struct RefineOptions {
    /// Also refine per-camera focal lengths.
    pub refine_focal: bool,
    pub max_iters: usize,
    /// Relative cost decrease below which iteration stops.
    pub rel_tol: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            refine_focal: false,
            max_iters: 50,
            rel_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineReport {
    /// Weighted RMS reprojection error before refinement, pixels.
    pub initial_rms_px: f64,
    /// Weighted RMS reprojection error after refinement, pixels.
    pub final_rms_px: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the iteration budget ran out before convergence.
    pub warning: Option<String>,
    /// Cost after every accepted iterate (squared-error units).
    pub cost_trace: Vec<f64>,
}

const MIN_TRACKS: usize = 20;

struct Problem {
    rotations: Vec<Vector3<f64>>, // axis-angle per camera
    translations: Vec<Vector3<f64>>,
    focals: Vec<[f64; 2]>,
    points: Vec<Vector3<f64>>,
    refine_focal: bool,
    n_cams: usize,
}

impl Problem {
    fn cam_param_len(&self) -> usize {
        if self.refine_focal {
            8
        } else {
            6
        }
    }

    /// Free-parameter layout: cameras 1.. (6 or 8 each), then points.
    fn free_len(&self) -> usize {
        (self.n_cams - 1) * self.cam_param_len() + 3 * self.points.len()
    }

    fn pack(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.free_len());
        let cl = self.cam_param_len();
        for c in 1..self.n_cams {
            let base = (c - 1) * cl;
            for k in 0..3 {
                x[base + k] = self.rotations[c][k];
                x[base + 3 + k] = self.translations[c][k];
            }
            if self.refine_focal {
                x[base + 6] = self.focals[c][0];
                x[base + 7] = self.focals[c][1];
            }
        }
        let off = (self.n_cams - 1) * cl;
        for (i, p) in self.points.iter().enumerate() {
            for k in 0..3 {
                x[off + 3 * i + k] = p[k];
            }
        }
        x
    }

    fn unpack(&mut self, x: &DVector<f64>) {
        let cl = self.cam_param_len();
        for c in 1..self.n_cams {
            let base = (c - 1) * cl;
            for k in 0..3 {
                self.rotations[c][k] = x[base + k];
                self.translations[c][k] = x[base + 3 + k];
            }
            if self.refine_focal {
                self.focals[c][0] = x[base + 6];
                self.focals[c][1] = x[base + 7];
            }
        }
        let off = (self.n_cams - 1) * cl;
        for (i, p) in self.points.iter_mut().enumerate() {
            for k in 0..3 {
                p[k] = x[off + 3 * i + k];
            }
        }
    }
}

/// Refines camera poses (and optionally focals) against multi-frame tracks.
///
/// Returns the refined cameras; the total reprojection error never increases
/// across accepted iterations, and the first camera is returned unchanged.
pub fn refine_cameras(
    initial: &[CameraModel],
    tracks: &[Track],
    opts: &RefineOptions,
) -> Result<(Vec<CameraModel>, RefineReport)> {
    if initial.len() < 2 {
        return Err(Error::Validation(format!(
            "camera refinement needs at least 2 cameras, got {}",
            initial.len()
        )));
    }
    if tracks.len() < MIN_TRACKS {
        return Err(Error::Validation(format!(
            "camera refinement needs at least {MIN_TRACKS} tracks, got {}",
            tracks.len()
        )));
    }
    for (i, t) in tracks.iter().enumerate() {
        if t.observations.len() < 2 {
            return Err(Error::Validation(format!(
                "track {i} has fewer than 2 observations"
            )));
        }
        if let Some(o) = t.observations.iter().find(|o| o.camera >= initial.len()) {
            return Err(Error::Validation(format!(
                "track {i} references camera {} of {}",
                o.camera,
                initial.len()
            )));
        }
    }

    // Initialize track points by triangulating with the initial cameras.
    let tri_opts = TriangulationOptions {
        score_floor: 0.0,
        ..TriangulationOptions::default()
    };
    let mut points = Vec::with_capacity(tracks.len());
    for (i, t) in tracks.iter().enumerate() {
        let obs: Vec<Observation2D> = t
            .observations
            .iter()
            .map(|o| Observation2D {
                camera: &initial[o.camera],
                uv: o.uv,
                score: o.score.max(1e-3),
            })
            .collect();
        let tri = triangulate_point(&obs, &tri_opts).map_err(|e| {
            Error::DegenerateGeometry(format!("track {i} failed to initialize: {e}"))
        })?;
        points.push(Vector3::from(tri.point));
    }

    let mut problem = Problem {
        rotations: initial.iter().map(|c| log_rotation(c.rotation())).collect(),
        translations: initial.iter().map(|c| *c.translation()).collect(),
        focals: initial.iter().map(|c| [c.fx, c.fy]).collect(),
        points,
        refine_focal: opts.refine_focal,
        n_cams: initial.len(),
    };

    let n_res: usize = 2 * tracks.iter().map(|t| t.observations.len()).sum::<usize>();
    let n_obs_weights: f64 = tracks
        .iter()
        .flat_map(|t| &t.observations)
        .map(|o| o.score)
        .sum();
    if n_obs_weights <= 0.0 {
        return Err(Error::Validation("all track observations have zero score".into()));
    }

    let residuals = |p: &Problem| -> DVector<f64> {
        let mut r = DVector::zeros(n_res);
        let mut row = 0;
        for (ti, t) in tracks.iter().enumerate() {
            for o in &t.observations {
                let (rot, _) = rotation_with_derivatives(&p.rotations[o.camera]);
                let pc = rot * p.points[ti] + p.translations[o.camera];
                let w = o.score.sqrt();
                if pc.z <= 1e-6 {
                    // Strongly penalize invalid depths so LM backs off.
                    r[row] = w * 1e4;
                    r[row + 1] = w * 1e4;
                } else {
                    let [fx, fy] = p.focals[o.camera];
                    let cam = &initial[o.camera];
                    let u = fx * pc.x / pc.z + cam.cx;
                    let v = fy * pc.y / pc.z + cam.cy;
                    r[row] = w * (u - o.uv[0]);
                    r[row + 1] = w * (v - o.uv[1]);
                }
                row += 2;
            }
        }
        r
    };

    let jacobian = |p: &Problem| -> DMatrix<f64> {
        let cl = p.cam_param_len();
        let off = (p.n_cams - 1) * cl;
        let mut jac = DMatrix::zeros(n_res, p.free_len());
        let mut row = 0;
        for (ti, t) in tracks.iter().enumerate() {
            for o in &t.observations {
                let (rot, drot) = rotation_with_derivatives(&p.rotations[o.camera]);
                let pc = rot * p.points[ti] + p.translations[o.camera];
                if pc.z <= 1e-6 {
                    row += 2;
                    continue;
                }
                let [fx, fy] = p.focals[o.camera];
                let w = o.score.sqrt();
                let inv_z = 1.0 / pc.z;
                let du = Vector3::new(fx * inv_z, 0.0, -fx * pc.x * inv_z * inv_z);
                let dv = Vector3::new(0.0, fy * inv_z, -fy * pc.y * inv_z * inv_z);
                // Point block.
                let ju_p = rot.transpose() * du;
                let jv_p = rot.transpose() * dv;
                for k in 0..3 {
                    jac[(row, off + 3 * ti + k)] = w * ju_p[k];
                    jac[(row + 1, off + 3 * ti + k)] = w * jv_p[k];
                }
                // Camera block (camera 0 fixed).
                if o.camera > 0 {
                    let base = (o.camera - 1) * cl;
                    for k in 0..3 {
                        let dpc: Vector3<f64> = drot[k] * p.points[ti];
                        jac[(row, base + k)] = w * du.dot(&dpc);
                        jac[(row + 1, base + k)] = w * dv.dot(&dpc);
                        // Translation: dpc/dt_k = e_k.
                        jac[(row, base + 3 + k)] = w * du[k];
                        jac[(row + 1, base + 3 + k)] = w * dv[k];
                    }
                    if p.refine_focal {
                        jac[(row, base + 6)] = w * pc.x * inv_z;
                        jac[(row + 1, base + 7)] = w * pc.y * inv_z;
                    }
                }
                row += 2;
            }
        }
        jac
    };

    let mut x = problem.pack();
    problem.unpack(&x);
    let mut r = residuals(&problem);
    let mut cost = r.norm_squared();
    let initial_cost = cost;
    let mut lambda = 1e-6;
    let mut trace = vec![cost];
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..opts.max_iters {
        let jac = jacobian(&problem);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut accepted = false;
        for _ in 0..20 {
            let mut damped = jtj.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * (jtj[(i, i)].abs() + 1e-12);
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let x_new = &x - &step;
            let mut trial = Problem {
                rotations: problem.rotations.clone(),
                translations: problem.translations.clone(),
                focals: problem.focals.clone(),
                points: problem.points.clone(),
                refine_focal: problem.refine_focal,
                n_cams: problem.n_cams,
            };
            trial.unpack(&x_new);
            let r_new = residuals(&trial);
            let cost_new = r_new.norm_squared();
            if cost_new <= cost {
                let rel = (cost - cost_new) / cost.max(1e-300);
                x = x_new;
                problem = trial;
                r = r_new;
                cost = cost_new;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                trace.push(cost);
                if rel < opts.rel_tol {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        iterations += 1;
        if !accepted {
            converged = true; // no descent direction left
            break;
        }
        if converged {
            break;
        }
    }

    // Pin the scale gauge, which reprojection cannot observe: rescale the
    // solution about the fixed first-camera center, choosing the scale that
    // moves the translations least from their initial values. Every residual
    // is exactly preserved by this transform.
    let c0 = initial[0].center();
    {
        let mut num = 0.0;
        let mut den = 0.0;
        for c in 1..problem.n_cams {
            let (rot, _) = rotation_with_derivatives(&problem.rotations[c]);
            let center = -(rot.transpose() * problem.translations[c]);
            // t(s) = a + s b with a = -R c0, b = -R (center - c0).
            let a = -(rot * c0);
            let b = -(rot * (center - c0));
            num += b.dot(&(initial[c].translation() - a));
            den += b.norm_squared();
        }
        if den > 1e-12 {
            let s = num / den;
            if s > 1e-6 && (s - 1.0).abs() > 1e-15 {
                for c in 1..problem.n_cams {
                    let (rot, _) = rotation_with_derivatives(&problem.rotations[c]);
                    let center = -(rot.transpose() * problem.translations[c]);
                    let scaled = c0 + (center - c0) * s;
                    problem.translations[c] = -(rot * scaled);
                }
                for p in problem.points.iter_mut() {
                    *p = c0 + (*p - c0) * s;
                }
            }
        }
    }

    let cameras: Vec<CameraModel> = (0..initial.len())
        .map(|c| {
            if c == 0 {
                return Ok(initial[0].clone());
            }
            let (rot, _) = rotation_with_derivatives(&problem.rotations[c]);
            // Re-orthonormalize to absorb numerical drift before validation.
            let svd = rot.svd(true, true);
            let rot = svd.u.unwrap() * svd.v_t.unwrap();
            CameraModel::new(
                initial[c].name.clone(),
                problem.focals[c][0],
                problem.focals[c][1],
                initial[c].cx,
                initial[c].cy,
                rot,
                problem.translations[c],
            )
        })
        .collect::<Result<_>>()?;

    let rms = |c: f64| (c / n_obs_weights).sqrt();
    let warning = if converged {
        None
    } else {
        Some(format!(
            "refinement stopped after {iterations} iterations before convergence"
        ))
    };
    Ok((
        cameras,
        RefineReport {
            initial_rms_px: rms(initial_cost),
            final_rms_px: rms(cost),
            iterations,
            converged,
            warning,
            cost_trace: trace,
        },
    ))
}
