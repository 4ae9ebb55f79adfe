//! Score-guided adaptive Savitzky-Golay smoothing of keypoint trajectories.
//!
//! Each output frame is a fixed linear combination of its neighbors, with
//! coefficients from a local least-squares polynomial fit. The half-width is
//! chosen per keypoint and per frame from the mean detector confidence in the
//! neighborhood: low confidence widens the window, high confidence keeps it
//! narrow to preserve motion detail.
//!
//! Sequence boundaries are handled by point-symmetric (odd) reflection about
//! the boundary sample, which keeps constant and linear trajectories exact at
//! the edges.

use crate::error::{Error, Result};
use crate::keypoints::{KeypointFrame2D, KeypointFrame3D};
use crate::skeleton::KEYPOINT_COUNT;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Savitzky-Golay filter configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    /// Degree of the local polynomial fit.
    pub poly_order: usize,
    /// Smallest half-width (used at full confidence).
    pub w_min: usize,
    /// Largest half-width (used at zero confidence).
    pub w_max: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            poly_order: 2,
            w_min: 2,
            w_max: 8,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.w_min < 1 || self.w_min > self.w_max {
            return Err(Error::Validation(format!(
                "window half-widths must satisfy 1 <= w_min <= w_max, got {} and {}",
                self.w_min, self.w_max
            )));
        }
        if self.poly_order >= 2 * self.w_min + 1 {
            return Err(Error::Validation(format!(
                "poly_order {} is not below the smallest window size {}",
                self.poly_order,
                2 * self.w_min + 1
            )));
        }
        Ok(())
    }

    /// Minimum sequence length the filter accepts.
    pub fn min_sequence_len(&self) -> usize {
        2 * self.w_min + 1
    }
}

/// Savitzky-Golay convolution coefficients `c_{-w..w}` for the given window
/// half-width and polynomial order.
///
/// Applying the coefficients to samples of any polynomial of degree at most
/// `poly_order` reproduces the center value exactly; in particular they sum
/// to one.
pub fn sg_coefficients(half_width: usize, poly_order: usize) -> Result<Vec<f64>> {
    let window = 2 * half_width + 1;
    if poly_order >= window {
        return Err(Error::Validation(format!(
            "poly_order {poly_order} requires a window larger than {window}"
        )));
    }
    // Least-squares fit on the scaled abscissa t/w for conditioning; the
    // smoothed center value is the fitted constant coefficient.
    let scale = half_width.max(1) as f64;
    let design = DMatrix::from_fn(window, poly_order + 1, |row, col| {
        let t = (row as f64 - half_width as f64) / scale;
        t.powi(col as i32)
    });
    let qr = design.clone().qr();
    let q = qr.q();
    let r = qr.r();
    // Row 0 of R^-1 Q^T: solve R^T x = e0, coefficients = Q x.
    let mut e0 = nalgebra::DVector::zeros(poly_order + 1);
    e0[0] = 1.0;
    let x = r
        .transpose()
        .solve_lower_triangular(&e0)
        .ok_or_else(|| Error::Validation("ill-conditioned Savitzky-Golay fit".into()))?;
    let coeffs = q * x;
    Ok(coeffs.iter().copied().collect())
}

/// Chooses the half-width for one frame of one keypoint channel from the
/// confidence series: `w = w_min + round((1 - s) * (w_max - w_min))` where
/// `s` is the mean confidence over the `w_max`-neighborhood of the frame.
pub fn adaptive_window(scores: &[f64], frame: usize, spec: &FilterSpec) -> usize {
    let lo = frame.saturating_sub(spec.w_max);
    let hi = (frame + spec.w_max).min(scores.len().saturating_sub(1));
    let neighborhood = &scores[lo..=hi];
    let mean: f64 = neighborhood.iter().sum::<f64>() / neighborhood.len() as f64;
    let span = (spec.w_max - spec.w_min) as f64;
    let w = spec.w_min + ((1.0 - mean) * span).round() as usize;
    w.clamp(spec.w_min, spec.w_max)
}

/// Sample the sequence at an arbitrary (possibly out-of-range) index using
/// odd reflection about the boundary samples.
fn reflected(values: &[f64], i: isize) -> f64 {
    let n = values.len() as isize;
    debug_assert!(n >= 2);
    if i < 0 {
        2.0 * values[0] - reflected(values, -i)
    } else if i >= n {
        2.0 * values[(n - 1) as usize] - reflected(values, 2 * (n - 1) - i)
    } else {
        values[i as usize]
    }
}

/// Smooths one scalar channel with per-frame half-widths.
fn smooth_channel(values: &[f64], windows: &[usize], poly_order: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(values.len(), windows.len());
    let mut max_w = 0;
    for &w in windows {
        max_w = max_w.max(w);
    }
    // Coefficient cache per half-width actually used.
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; max_w + 1];
    let mut out = Vec::with_capacity(values.len());
    for (i, &w) in windows.iter().enumerate() {
        let coeffs = match &cache[w] {
            Some(c) => c,
            None => {
                cache[w] = Some(sg_coefficients(w, poly_order)?);
                cache[w].as_ref().unwrap()
            }
        };
        let mut acc = 0.0;
        for (j, &c) in coeffs.iter().enumerate() {
            let idx = i as isize + j as isize - w as isize;
            acc += c * reflected(values, idx);
        }
        out.push(acc);
    }
    Ok(out)
}

fn check_length(len: usize, spec: &FilterSpec) -> Result<()> {
    spec.validate()?;
    let needed = spec.min_sequence_len();
    if len < needed {
        return Err(Error::Validation(format!(
            "sequence of {len} frames is too short to smooth; at least {needed} required"
        )));
    }
    Ok(())
}

/// Per-frame, per-keypoint window choices for a sequence.
fn window_table(
    score_series: impl Fn(usize, usize) -> f64,
    frames: usize,
    spec: &FilterSpec,
) -> Vec<Vec<usize>> {
    (0..KEYPOINT_COUNT)
        .map(|k| {
            let scores: Vec<f64> = (0..frames).map(|t| score_series(k, t)).collect();
            (0..frames)
                .map(|t| adaptive_window(&scores, t, spec))
                .collect()
        })
        .collect()
}

/// Smooths a 2D keypoint sequence. Scores pass through unchanged.
pub fn smooth_sequence(frames: &[KeypointFrame2D], spec: &FilterSpec) -> Result<Vec<KeypointFrame2D>> {
    check_length(frames.len(), spec)?;
    let n = frames.len();
    let windows = window_table(|k, t| frames[t].scores[k], n, spec);
    let mut out = frames.to_vec();
    for k in 0..KEYPOINT_COUNT {
        for axis in 0..2 {
            let series: Vec<f64> = frames.iter().map(|f| f.points[k][axis]).collect();
            let smoothed = smooth_channel(&series, &windows[k], spec.poly_order)?;
            for (t, v) in smoothed.into_iter().enumerate() {
                out[t].points[k][axis] = v;
            }
        }
    }
    Ok(out)
}

/// Smooths a 3D keypoint sequence (each coordinate is a channel).
pub fn smooth_sequence_3d(
    frames: &[KeypointFrame3D],
    spec: &FilterSpec,
) -> Result<Vec<KeypointFrame3D>> {
    check_length(frames.len(), spec)?;
    let n = frames.len();
    let windows = window_table(|k, t| frames[t].scores[k], n, spec);
    let mut out = frames.to_vec();
    for k in 0..KEYPOINT_COUNT {
        for axis in 0..3 {
            let series: Vec<f64> = frames.iter().map(|f| f.points[k][axis]).collect();
            let smoothed = smooth_channel(&series, &windows[k], spec.poly_order)?;
            for (t, v) in smoothed.into_iter().enumerate() {
                out[t].points[k][axis] = v;
            }
        }
    }
    Ok(out)
}
