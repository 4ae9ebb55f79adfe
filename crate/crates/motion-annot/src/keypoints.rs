//! Whole-body keypoint frames (2D detector space and triangulated 3D).

use crate::error::{Error, Result};
use crate::skeleton::KEYPOINT_COUNT;
use serde::{Deserialize, Serialize};

/// One frame of 2D whole-body keypoints with per-point confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFrame2D {
    /// Pixel coordinates, 133 x (u, v).
    pub points: Vec<[f64; 2]>,
    /// Confidences in [0, 1], one per point.
    pub scores: Vec<f64>,
}

/// One frame of 3D whole-body keypoints with per-point confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFrame3D {
    /// World coordinates, 133 x (x, y, z), meters.
    pub points: Vec<[f64; 3]>,
    /// Confidences in [0, 1], one per point.
    pub scores: Vec<f64>,
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.len() != KEYPOINT_COUNT {
        return Err(Error::Structural(format!(
            "expected {KEYPOINT_COUNT} scores, got {}",
            scores.len()
        )));
    }
    for &s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Validation(format!("score {s} outside [0, 1]")));
        }
    }
    Ok(())
}

impl KeypointFrame2D {
    pub fn new(points: Vec<[f64; 2]>, scores: Vec<f64>) -> Result<Self> {
        if points.len() != KEYPOINT_COUNT {
            return Err(Error::Structural(format!(
                "expected {KEYPOINT_COUNT} points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Validation("non-finite keypoint coordinate".into()));
        }
        check_scores(&scores)?;
        Ok(Self { points, scores })
    }

    /// All-zero frame (scores 0 mark every point unobserved).
    pub fn empty() -> Self {
        Self {
            points: vec![[0.0; 2]; KEYPOINT_COUNT],
            scores: vec![0.0; KEYPOINT_COUNT],
        }
    }
}

impl KeypointFrame3D {
    pub fn new(points: Vec<[f64; 3]>, scores: Vec<f64>) -> Result<Self> {
        if points.len() != KEYPOINT_COUNT {
            return Err(Error::Structural(format!(
                "expected {KEYPOINT_COUNT} points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Validation("non-finite keypoint coordinate".into()));
        }
        check_scores(&scores)?;
        Ok(Self { points, scores })
    }

    pub fn empty() -> Self {
        Self {
            points: vec![[0.0; 3]; KEYPOINT_COUNT],
            scores: vec![0.0; KEYPOINT_COUNT],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_point_count() {
        let err = KeypointFrame2D::new(vec![[0.0; 2]; 132], vec![0.0; KEYPOINT_COUNT]);
        assert!(matches!(err, Err(Error::Structural(_))));
    }

    #[test]
    fn rejects_out_of_range_score() {
        let mut scores = vec![0.5; KEYPOINT_COUNT];
        scores[7] = 1.5;
        let err = KeypointFrame2D::new(vec![[0.0; 2]; KEYPOINT_COUNT], scores);
        assert!(matches!(err, Err(Error::Validation(_))));
    }
}
