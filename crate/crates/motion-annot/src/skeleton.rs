//! Whole-body skeleton topology and shape.
//!
//! The skeleton is a rigid kinematic tree of 53 joints: 22 body joints,
//! 15 per hand, and one jaw joint. Each non-root joint carries a unit rest
//! direction (parent-to-joint in the rest pose); bone lengths live in
//! [`SkeletonShape`] so the same topology serves differently sized subjects.
//! A fixed partial map ties the 133-keypoint whole-body detector layout to
//! skeleton joints; joints without a detector counterpart are unobserved.

use crate::error::{Error, Result};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Number of keypoints in the whole-body detector layout.
pub const KEYPOINT_COUNT: usize = 133;
/// Total joints in the skeleton.
pub const JOINT_COUNT: usize = 53;
/// Body joints (including the pelvis root).
pub const BODY_JOINT_COUNT: usize = 22;
/// Joints per hand.
pub const HAND_JOINT_COUNT: usize = 15;

const UNIT_TOL: f64 = 1e-9;

/// Kinematic tree structure: joint names, parents, rest directions, and the
/// detector-keypoint correspondence.
#[derive(Debug, Clone)]
pub struct SkeletonTopology {
    name: String,
    joints: Vec<String>,
    parent: Vec<Option<usize>>,
    rest_directions: Vec<Option<Vector3<f64>>>,
    keypoint_map: Vec<Option<usize>>,
    joint_to_keypoint: Vec<Option<usize>>,
    name_index: HashMap<String, usize>,
    topo_order: Vec<usize>,
}

/// Per-bone lengths in meters, indexed by child joint. The root slot is
/// unused and stored as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonShape {
    pub(crate) bone_lengths: Vec<f64>,
}

impl SkeletonShape {
    pub fn new(bone_lengths: Vec<f64>, topology: &SkeletonTopology) -> Result<Self> {
        if bone_lengths.len() != topology.len() {
            return Err(Error::Structural(format!(
                "expected {} bone lengths, got {}",
                topology.len(),
                bone_lengths.len()
            )));
        }
        for (j, &len) in bone_lengths.iter().enumerate() {
            if topology.parent(j).is_none() {
                continue;
            }
            if !len.is_finite() || len <= 0.0 {
                return Err(Error::Validation(format!(
                    "bone length for joint `{}` must be positive and finite, got {len}",
                    topology.joint_name(j)
                )));
            }
        }
        Ok(Self { bone_lengths })
    }

    pub fn bone_length(&self, joint: usize) -> f64 {
        self.bone_lengths[joint]
    }

    pub fn bone_lengths(&self) -> &[f64] {
        &self.bone_lengths
    }
}

impl SkeletonTopology {
    /// Builds and validates a topology.
    ///
    /// `joints[i]` is the name of joint `i`, `parent[i]` its parent index
    /// (None exactly for the root, which must be joint 0), `rest_directions[i]`
    /// the unit parent-to-joint direction in rest pose, and `keypoint_map[k]`
    /// the joint observed by detector keypoint `k` (if any).
    pub fn new(
        name: String,
        joints: Vec<String>,
        parent: Vec<Option<usize>>,
        rest_directions: Vec<Option<Vector3<f64>>>,
        keypoint_map: Vec<Option<usize>>,
    ) -> Result<Self> {
        let n = joints.len();
        if parent.len() != n || rest_directions.len() != n {
            return Err(Error::Structural(format!(
                "inconsistent topology arrays: {} joints, {} parents, {} rest directions",
                n,
                parent.len(),
                rest_directions.len()
            )));
        }
        if keypoint_map.len() != KEYPOINT_COUNT {
            return Err(Error::Structural(format!(
                "keypoint map must cover {KEYPOINT_COUNT} keypoints, got {}",
                keypoint_map.len()
            )));
        }

        let roots: Vec<usize> = (0..n).filter(|&j| parent[j].is_none()).collect();
        if roots != [0] {
            return Err(Error::Validation(format!(
                "topology must have joint 0 as its single root, found roots {roots:?}"
            )));
        }
        for (j, &p) in parent.iter().enumerate() {
            if let Some(p) = p {
                if p >= n {
                    return Err(Error::Validation(format!(
                        "joint `{}` references out-of-range parent {p}",
                        joints[j]
                    )));
                }
            }
        }
        // Cycle check: walk each joint to the root.
        for start in 0..n {
            let mut seen = 0usize;
            let mut cur = start;
            while let Some(p) = parent[cur] {
                cur = p;
                seen += 1;
                if seen > n {
                    return Err(Error::Validation(format!(
                        "parent relation contains a cycle through joint `{}`",
                        joints[start]
                    )));
                }
            }
        }
        for (j, dir) in rest_directions.iter().enumerate() {
            match (parent[j], dir) {
                (Some(_), Some(d)) => {
                    if (d.norm() - 1.0).abs() > UNIT_TOL {
                        return Err(Error::Validation(format!(
                            "rest direction of joint `{}` is not unit norm (|d| = {})",
                            joints[j],
                            d.norm()
                        )));
                    }
                }
                (Some(_), None) => {
                    return Err(Error::Validation(format!(
                        "non-root joint `{}` is missing a rest direction",
                        joints[j]
                    )))
                }
                (None, Some(_)) => {
                    return Err(Error::Validation(
                        "root joint must not carry a rest direction".into(),
                    ))
                }
                (None, None) => {}
            }
        }

        let mut joint_to_keypoint = vec![None; n];
        for (k, &j) in keypoint_map.iter().enumerate() {
            if let Some(j) = j {
                if j >= n {
                    return Err(Error::Validation(format!(
                        "keypoint {k} maps to out-of-range joint {j}"
                    )));
                }
                if let Some(prev) = joint_to_keypoint[j] {
                    return Err(Error::Validation(format!(
                        "keypoint map is not injective: keypoints {prev} and {k} both map to joint `{}`",
                        joints[j]
                    )));
                }
                joint_to_keypoint[j] = Some(k);
            }
        }

        let mut name_index = HashMap::new();
        for (j, jn) in joints.iter().enumerate() {
            if name_index.insert(jn.clone(), j).is_some() {
                return Err(Error::Validation(format!("duplicate joint name `{jn}`")));
            }
        }

        // Topological order (parents before children). Joint arrays are
        // usually already ordered, but loaded files need not be.
        let mut order = Vec::with_capacity(n);
        let mut placed = vec![false; n];
        while order.len() < n {
            let before = order.len();
            for j in 0..n {
                if !placed[j] && parent[j].map_or(true, |p| placed[p]) {
                    placed[j] = true;
                    order.push(j);
                }
            }
            if order.len() == before {
                return Err(Error::Validation("parent relation is not a tree".into()));
            }
        }

        Ok(Self {
            name,
            joints,
            parent,
            rest_directions,
            keypoint_map,
            joint_to_keypoint,
            name_index,
            topo_order: order,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn joint_name(&self, joint: usize) -> &str {
        &self.joints[joint]
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.name_index.get(name).copied()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn rest_direction(&self, joint: usize) -> Option<&Vector3<f64>> {
        self.rest_directions[joint].as_ref()
    }

    /// Joint observed by a detector keypoint, if any.
    pub fn joint_for_keypoint(&self, keypoint: usize) -> Option<usize> {
        self.keypoint_map.get(keypoint).copied().flatten()
    }

    /// Detector keypoint observing a joint, if any.
    pub fn keypoint_for_joint(&self, joint: usize) -> Option<usize> {
        self.joint_to_keypoint.get(joint).copied().flatten()
    }

    /// Joint indices in an order where every parent precedes its children.
    pub fn topological_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// (keypoint, joint) pairs for all mapped keypoints.
    pub fn observed_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.keypoint_map
            .iter()
            .enumerate()
            .filter_map(|(k, j)| j.map(|j| (k, j)))
    }
}

// ---------------------------------------------------------------------------
// Default whole-body skeleton
// ---------------------------------------------------------------------------

/// Rest offsets (meters) for the default skeleton. Coordinates are z-up with
/// the subject facing +x; +y is the subject's left. Arms hang at the sides.
/// Offset is parent-to-joint; direction and bone length derive from it.
#[rustfmt::skip]
const DEFAULT_JOINTS: &[(&str, Option<&str>, [f64; 3])] = &[
    // body (SMPL-X joint order)
    ("pelvis",         None,                  [0.0, 0.0, 0.0]),
    ("left_hip",       Some("pelvis"),        [0.0, 0.085, -0.075]),
    ("right_hip",      Some("pelvis"),        [0.0, -0.085, -0.075]),
    ("spine1",         Some("pelvis"),        [0.0, 0.0, 0.110]),
    ("left_knee",      Some("left_hip"),      [0.0, 0.0, -0.380]),
    ("right_knee",     Some("right_hip"),     [0.0, 0.0, -0.380]),
    ("spine2",         Some("spine1"),        [0.0, 0.0, 0.140]),
    ("left_ankle",     Some("left_knee"),     [0.0, 0.0, -0.400]),
    ("right_ankle",    Some("right_knee"),    [0.0, 0.0, -0.400]),
    ("spine3",         Some("spine2"),        [0.0, 0.0, 0.060]),
    ("left_foot",      Some("left_ankle"),    [0.130, 0.0, -0.060]),
    ("right_foot",     Some("right_ankle"),   [0.130, 0.0, -0.060]),
    ("neck",           Some("spine3"),        [0.0, 0.0, 0.210]),
    ("left_collar",    Some("spine3"),        [0.0, 0.070, 0.120]),
    ("right_collar",   Some("spine3"),        [0.0, -0.070, 0.120]),
    ("head",           Some("neck"),          [0.0, 0.0, 0.065]),
    ("left_shoulder",  Some("left_collar"),   [0.0, 0.105, 0.020]),
    ("right_shoulder", Some("right_collar"),  [0.0, -0.105, 0.020]),
    ("left_elbow",     Some("left_shoulder"), [0.0, 0.020, -0.265]),
    ("right_elbow",    Some("right_shoulder"),[0.0, -0.020, -0.265]),
    ("left_wrist",     Some("left_elbow"),    [0.0, 0.015, -0.250]),
    ("right_wrist",    Some("right_elbow"),   [0.0, -0.015, -0.250]),
    // left hand (index, middle, pinky, ring, thumb; 3 joints each)
    ("left_index1",    Some("left_wrist"),    [0.035, 0.0, -0.085]),
    ("left_index2",    Some("left_index1"),   [0.006, 0.0, -0.033]),
    ("left_index3",    Some("left_index2"),   [0.004, 0.0, -0.022]),
    ("left_middle1",   Some("left_wrist"),    [0.012, 0.0, -0.090]),
    ("left_middle2",   Some("left_middle1"),  [0.002, 0.0, -0.036]),
    ("left_middle3",   Some("left_middle2"),  [0.001, 0.0, -0.024]),
    ("left_pinky1",    Some("left_wrist"),    [-0.035, 0.0, -0.080]),
    ("left_pinky2",    Some("left_pinky1"),   [-0.004, 0.0, -0.028]),
    ("left_pinky3",    Some("left_pinky2"),   [-0.003, 0.0, -0.019]),
    ("left_ring1",     Some("left_wrist"),    [-0.012, 0.0, -0.086]),
    ("left_ring2",     Some("left_ring1"),    [-0.003, 0.0, -0.033]),
    ("left_ring3",     Some("left_ring2"),    [-0.002, 0.0, -0.022]),
    ("left_thumb1",    Some("left_wrist"),    [0.028, -0.010, -0.040]),
    ("left_thumb2",    Some("left_thumb1"),   [0.018, -0.008, -0.033]),
    ("left_thumb3",    Some("left_thumb2"),   [0.012, -0.005, -0.026]),
    // right hand (mirror in y)
    ("right_index1",   Some("right_wrist"),   [0.035, 0.0, -0.085]),
    ("right_index2",   Some("right_index1"),  [0.006, 0.0, -0.033]),
    ("right_index3",   Some("right_index2"),  [0.004, 0.0, -0.022]),
    ("right_middle1",  Some("right_wrist"),   [0.012, 0.0, -0.090]),
    ("right_middle2",  Some("right_middle1"), [0.002, 0.0, -0.036]),
    ("right_middle3",  Some("right_middle2"), [0.001, 0.0, -0.024]),
    ("right_pinky1",   Some("right_wrist"),   [-0.035, 0.0, -0.080]),
    ("right_pinky2",   Some("right_pinky1"),  [-0.004, 0.0, -0.028]),
    ("right_pinky3",   Some("right_pinky2"),  [-0.003, 0.0, -0.019]),
    ("right_ring1",    Some("right_wrist"),   [-0.012, 0.0, -0.086]),
    ("right_ring2",    Some("right_ring1"),   [-0.003, 0.0, -0.033]),
    ("right_ring3",    Some("right_ring2"),   [-0.002, 0.0, -0.022]),
    ("right_thumb1",   Some("right_wrist"),   [0.028, 0.010, -0.040]),
    ("right_thumb2",   Some("right_thumb1"),  [0.018, 0.008, -0.033]),
    ("right_thumb3",   Some("right_thumb2"),  [0.012, 0.005, -0.026]),
    // jaw
    ("jaw",            Some("head"),          [0.020, 0.0, -0.030]),
];

/// Detector keypoint index -> joint name, for the 133-keypoint layout
/// (17 COCO body, 6 feet, 68 face, 2x21 hands). Face points, finger tips,
/// and the duplicate hand-wrist points are left unmapped.
#[rustfmt::skip]
const DEFAULT_KEYPOINT_MAP: &[(usize, &str)] = &[
    (5, "left_shoulder"), (6, "right_shoulder"),
    (7, "left_elbow"), (8, "right_elbow"),
    (9, "left_wrist"), (10, "right_wrist"),
    (11, "left_hip"), (12, "right_hip"),
    (13, "left_knee"), (14, "right_knee"),
    (15, "left_ankle"), (16, "right_ankle"),
    (17, "left_foot"), (20, "right_foot"),
    // left hand: 91 wrist, then thumb/index/middle/ring/pinky x 4
    (92, "left_thumb1"), (93, "left_thumb2"), (94, "left_thumb3"),
    (96, "left_index1"), (97, "left_index2"), (98, "left_index3"),
    (100, "left_middle1"), (101, "left_middle2"), (102, "left_middle3"),
    (104, "left_ring1"), (105, "left_ring2"), (106, "left_ring3"),
    (108, "left_pinky1"), (109, "left_pinky2"), (110, "left_pinky3"),
    // right hand
    (113, "right_thumb1"), (114, "right_thumb2"), (115, "right_thumb3"),
    (117, "right_index1"), (118, "right_index2"), (119, "right_index3"),
    (121, "right_middle1"), (122, "right_middle2"), (123, "right_middle3"),
    (125, "right_ring1"), (126, "right_ring2"), (127, "right_ring3"),
    (129, "right_pinky1"), (130, "right_pinky2"), (131, "right_pinky3"),
];

/// The default 53-joint whole-body skeleton and its rest-pose shape.
pub fn default_skeleton() -> (SkeletonTopology, SkeletonShape) {
    let mut names = Vec::with_capacity(JOINT_COUNT);
    let mut parents = Vec::with_capacity(JOINT_COUNT);
    let mut dirs = Vec::with_capacity(JOINT_COUNT);
    let mut lengths = Vec::with_capacity(JOINT_COUNT);
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, (name, parent, offset)) in DEFAULT_JOINTS.iter().enumerate() {
        index.insert(name, i);
        names.push(name.to_string());
        parents.push(parent.map(|p| index[p]));
        let v = Vector3::new(offset[0], offset[1], offset[2]);
        if parent.is_some() {
            lengths.push(v.norm());
            dirs.push(Some(v.normalize()));
        } else {
            lengths.push(0.0);
            dirs.push(None);
        }
    }
    let mut keypoint_map = vec![None; KEYPOINT_COUNT];
    for (k, joint_name) in DEFAULT_KEYPOINT_MAP {
        keypoint_map[*k] = Some(index[joint_name]);
    }
    let topology = SkeletonTopology::new(
        "wholebody53".to_string(),
        names,
        parents,
        dirs,
        keypoint_map,
    )
    .expect("default topology is valid");
    let shape = SkeletonShape::new(lengths, &topology).expect("default shape is valid");
    (topology, shape)
}

// ---------------------------------------------------------------------------
// JSON description
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct JointJson {
    name: String,
    parent: Option<String>,
    rest_direction: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoint: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct TopologyJson {
    name: String,
    joints: Vec<JointJson>,
}

impl SkeletonTopology {
    /// Loads a topology from its JSON description.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let parsed: TopologyJson =
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.display().to_string(),
                source,
            })?;
        let mut index = HashMap::new();
        for (i, j) in parsed.joints.iter().enumerate() {
            index.insert(j.name.clone(), i);
        }
        let mut names = Vec::new();
        let mut parents = Vec::new();
        let mut dirs = Vec::new();
        let mut keypoint_map = vec![None; KEYPOINT_COUNT];
        for (i, j) in parsed.joints.iter().enumerate() {
            names.push(j.name.clone());
            let parent = match &j.parent {
                Some(p) => Some(*index.get(p).ok_or_else(|| {
                    Error::Validation(format!(
                        "joint `{}` references unknown parent `{p}`",
                        j.name
                    ))
                })?),
                None => None,
            };
            parents.push(parent);
            dirs.push(j.rest_direction.map(|d| Vector3::new(d[0], d[1], d[2])));
            if let Some(k) = j.keypoint {
                if k >= KEYPOINT_COUNT {
                    return Err(Error::Validation(format!(
                        "joint `{}` maps to out-of-range keypoint {k}",
                        j.name
                    )));
                }
                keypoint_map[k] = Some(i);
            }
        }
        Self::new(parsed.name, names, parents, dirs, keypoint_map)
    }

    /// Writes the JSON description consumed by [`SkeletonTopology::load`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let joints: Vec<JointJson> = (0..self.len())
            .map(|j| JointJson {
                name: self.joints[j].clone(),
                parent: self.parent[j].map(|p| self.joints[p].clone()),
                rest_direction: self.rest_directions[j].map(|d| [d.x, d.y, d.z]),
                keypoint: self.joint_to_keypoint[j],
            })
            .collect();
        let doc = TopologyJson {
            name: self.name.clone(),
            joints,
        };
        let text = serde_json::to_string_pretty(&doc).expect("topology serializes");
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_skeleton_has_expected_layout() {
        let (topo, shape) = default_skeleton();
        assert_eq!(topo.len(), JOINT_COUNT);
        assert_eq!(topo.joint_index("pelvis"), Some(0));
        assert_eq!(topo.parent(0), None);
        // 22 body + 30 hand + 1 jaw
        assert_eq!(topo.joint_index("left_index1"), Some(BODY_JOINT_COUNT));
        assert_eq!(topo.joint_index("jaw"), Some(JOINT_COUNT - 1));
        for j in 1..topo.len() {
            assert!(shape.bone_length(j) > 0.0);
            let d = topo.rest_direction(j).unwrap();
            assert!((d.norm() - 1.0).abs() < 1e-9);
        }
        let observed = topo.observed_pairs().count();
        assert_eq!(observed, 44);
    }

    #[test]
    fn keypoint_map_is_injective() {
        let (topo, _) = default_skeleton();
        let mut seen = std::collections::HashSet::new();
        for (_, j) in topo.observed_pairs() {
            assert!(seen.insert(j), "joint {j} observed twice");
        }
    }

    #[test]
    fn rejects_cyclic_parent_relation() {
        let joints = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let parent = vec![None, Some(2), Some(1)];
        let dir = Vector3::new(0.0, 0.0, 1.0);
        let dirs = vec![None, Some(dir), Some(dir)];
        let err = SkeletonTopology::new(
            "bad".into(),
            joints,
            parent,
            dirs,
            vec![None; KEYPOINT_COUNT],
        );
        assert!(err.is_err());
    }

    #[test]
    fn rejects_non_unit_rest_direction() {
        let joints = vec!["a".to_string(), "b".to_string()];
        let parent = vec![None, Some(0)];
        let dirs = vec![None, Some(Vector3::new(0.0, 0.0, 1.5))];
        let err = SkeletonTopology::new(
            "bad".into(),
            joints,
            parent,
            dirs,
            vec![None; KEYPOINT_COUNT],
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_non_injective_keypoint_map() {
        let (topo, _) = default_skeleton();
        let mut map = vec![None; KEYPOINT_COUNT];
        map[5] = Some(1);
        map[6] = Some(1);
        let err = SkeletonTopology::new(
            "bad".into(),
            (0..topo.len()).map(|j| topo.joint_name(j).to_string()).collect(),
            (0..topo.len()).map(|j| topo.parent(j)).collect(),
            (0..topo.len()).map(|j| topo.rest_direction(j).copied()).collect(),
            map,
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn topology_round_trips_through_json() {
        let (topo, _) = default_skeleton();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("topology.json");
        topo.save(&path).unwrap();
        let loaded = SkeletonTopology::load(&path).unwrap();
        assert_eq!(loaded.len(), topo.len());
        for j in 0..topo.len() {
            assert_eq!(loaded.joint_name(j), topo.joint_name(j));
            assert_eq!(loaded.parent(j), topo.parent(j));
            assert_eq!(loaded.keypoint_for_joint(j), topo.keypoint_for_joint(j));
        }
    }
}
