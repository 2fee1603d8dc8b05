// SPDX-License-Identifier: Apache-2.0

//! 22-joint kinematic tree, forward kinematics and sparse tracker features.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pose::{JointPositions, PoseSequence, NUM_JOINTS, POSE_DIM};
use crate::rotation::{self, Decode6D, Mat3, Rotation6D, Vec3};
use crate::tensor::{Scalar, Tensor};

/// Joint order of the body model (pelvis first, children after parents).
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
];

pub const ROOT: usize = 0;
pub const HEAD: usize = 15;
pub const LEFT_WRIST: usize = 20;
pub const RIGHT_WRIST: usize = 21;

/// Joints tracked by the headset and the two controllers, in feature order.
pub const TRACKED_JOINTS: [usize; 3] = [HEAD, LEFT_WRIST, RIGHT_WRIST];
/// Features per tracker: position 3, velocity 3, rotation 6, angular velocity 6.
pub const TRACKER_DIM: usize = 18;
pub const INPUT_DIM: usize = TRACKER_DIM * TRACKED_JOINTS.len();

pub const ROOT_JOINTS: [usize; 1] = [ROOT];
pub const HAND_JOINTS: [usize; 2] = [LEFT_WRIST, RIGHT_WRIST];
/// Hips, knees, ankles and feet.
pub const LOWER_JOINTS: [usize; 8] = [1, 2, 4, 5, 7, 8, 10, 11];
/// Everything except the lower body and the root.
pub const UPPER_JOINTS: [usize; 13] = [3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21];

/// Rest-pose humanoid, y up, +x towards the body's left, meters.
const DEFAULT_OFFSETS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.09, -0.08, 0.0],
    [-0.09, -0.08, 0.0],
    [0.0, 0.11, -0.02],
    [0.0, -0.45, 0.01],
    [0.0, -0.45, 0.01],
    [0.0, 0.13, 0.01],
    [0.0, -0.42, -0.03],
    [0.0, -0.42, -0.03],
    [0.0, 0.06, 0.0],
    [0.0, -0.06, 0.13],
    [0.0, -0.06, 0.13],
    [0.0, 0.21, -0.02],
    [0.08, 0.12, 0.0],
    [-0.08, 0.12, 0.0],
    [0.0, 0.10, 0.04],
    [0.10, 0.03, -0.01],
    [-0.10, 0.03, -0.01],
    [0.27, 0.0, 0.0],
    [-0.27, 0.0, 0.0],
    [0.25, 0.0, 0.0],
    [-0.25, 0.0, 0.0],
];

const SKELETON_HEADER: &str = "ssdp-skeleton";
const SKELETON_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<[f64; 3]>,
}

impl Default for Skeleton {
    fn default() -> Self {
        Self {
            names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            parents: PARENTS.to_vec(),
            offsets: DEFAULT_OFFSETS.to_vec(),
        }
    }
}

impl Skeleton {
    /// Requires a tree rooted at joint 0 with every parent preceding its child.
    pub fn new(names: Vec<String>, parents: Vec<Option<usize>>, offsets: Vec<[f64; 3]>) -> Result<Self> {
        if names.len() != parents.len() || names.len() != offsets.len() {
            return Err(Error::InvalidSkeleton("field lengths differ".into()));
        }
        if names.is_empty() {
            return Err(Error::InvalidSkeleton("no joints".into()));
        }
        for (j, p) in parents.iter().enumerate() {
            match (j, p) {
                (0, None) => {}
                (0, Some(_)) => return Err(Error::InvalidSkeleton("joint 0 must be the root".into())),
                (_, None) => return Err(Error::InvalidSkeleton(format!("joint {j} has no parent"))),
                (_, Some(p)) if *p >= j => {
                    return Err(Error::InvalidSkeleton(format!(
                        "joint {j} has parent {p}; parents must precede children"
                    )))
                }
                _ => {}
            }
        }
        if offsets.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSkeleton("non-finite offset".into()));
        }
        Ok(Self {
            names,
            parents,
            offsets,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn offset(&self, joint: usize) -> [f64; 3] {
        self.offsets[joint]
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{SKELETON_HEADER} {SKELETON_VERSION}\n# name parent offset(x,y,z) in meters\n");
        for j in 0..self.num_joints() {
            let parent = self.parents[j].map_or("-".to_string(), |p| self.names[p].clone());
            let [x, y, z] = self.offsets[j];
            let _ = writeln!(out, "name={} parent={parent} offset={x},{y},{z}", self.names[j]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (line, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty skeleton file".into(),
        })?;
        let version = header
            .strip_prefix(SKELETON_HEADER)
            .map(str::trim)
            .ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected '{SKELETON_HEADER} <version>' header"),
            })?
            .parse::<u32>()
            .map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
        if version != SKELETON_VERSION {
            return Err(Error::VersionMismatch {
                expected: SKELETON_VERSION,
                found: version,
            });
        }

        let (mut names, mut parents, mut offsets) = (Vec::new(), Vec::new(), Vec::new());
        for (line, text) in lines {
            let err = |msg: String| Error::Parse { line, msg };
            let (mut name, mut parent, mut offset) = (None, None, None);
            for field in text.split_whitespace() {
                let (key, value) = field
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected key=value, found '{field}'")))?;
                match key {
                    "name" => name = Some(value.to_string()),
                    "parent" => parent = Some(value.to_string()),
                    "offset" => {
                        let v: Vec<f64> = value
                            .split(',')
                            .map(|s| s.parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|e| err(format!("offset: {e}")))?;
                        let v: [f64; 3] = v.try_into().map_err(|_| err("offset needs three components".into()))?;
                        offset = Some(v);
                    }
                    other => return Err(err(format!("unknown key '{other}'"))),
                }
            }
            let name = name.ok_or_else(|| err("missing name".into()))?;
            let parent = match parent.ok_or_else(|| err("missing parent".into()))?.as_str() {
                "-" => None,
                p => Some(
                    names
                        .iter()
                        .position(|n: &String| n == p)
                        .ok_or_else(|| err(format!("parent '{p}' not defined before '{name}'")))?,
                ),
            };
            names.push(name);
            parents.push(parent);
            offsets.push(offset.ok_or_else(|| err("missing offset".into()))?);
        }
        Self::new(names, parents, offsets)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn check_pose_compatible(&self) -> Result<()> {
        if self.num_joints() != NUM_JOINTS {
            return Err(Error::InvalidSkeleton(format!(
                "pose sequences carry {NUM_JOINTS} joints, skeleton has {}",
                self.num_joints()
            )));
        }
        Ok(())
    }
}

/// One frame of forward kinematics with the intermediates needed for backward.
#[derive(Debug, Clone)]
pub struct FkFrame<S> {
    pub decodes: Vec<Decode6D<S>>,
    pub global: Vec<Mat3<S>>,
    pub positions: Vec<Vec3<S>>,
}

/// `global[j] = global[parent]·local[j]`, `pos[j] = pos[parent] + global[parent]·offset[j]`.
pub fn fk_frame<S: Scalar>(skel: &Skeleton, rot6d: &[S], root: &Vec3<S>) -> FkFrame<S> {
    let n = skel.num_joints();
    debug_assert_eq!(rot6d.len(), n * 6);
    let eps = S::lit(1e-12);
    let decodes: Vec<Decode6D<S>> = (0..n)
        .map(|j| {
            let r: &[S; 6] = rot6d[j * 6..j * 6 + 6].try_into().expect("six");
            rotation::gram_schmidt(r, eps)
        })
        .collect();
    let mut global = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    for j in 0..n {
        match skel.parents[j] {
            None => {
                global.push(decodes[j].matrix);
                positions.push(*root);
            }
            Some(p) => {
                let off = skel.offsets[j].map(S::lit);
                let pos = rotation::add(&positions[p], &rotation::apply(&global[p], &off));
                global.push(rotation::matmul(&global[p], &decodes[j].matrix));
                positions.push(pos);
            }
        }
    }
    FkFrame {
        decodes,
        global,
        positions,
    }
}

/// Gradients of a loss with respect to the 6D rotations and the root
/// translation, given its gradient `d_pos` (joints × 3) on the positions.
pub fn fk_frame_backward<S: Scalar>(skel: &Skeleton, rot6d: &[S], fwd: &FkFrame<S>, d_pos: &[S]) -> (Vec<S>, Vec3<S>) {
    let n = skel.num_joints();
    let zero3 = [[S::zero(); 3]; 3];
    let mut d_global = vec![zero3; n];
    let mut d_p: Vec<Vec3<S>> = (0..n)
        .map(|j| [d_pos[j * 3], d_pos[j * 3 + 1], d_pos[j * 3 + 2]])
        .collect();
    let mut d_rot = vec![S::zero(); n * 6];

    for j in (0..n).rev() {
        let d_local = match skel.parents[j] {
            None => d_global[j],
            Some(p) => {
                let off = skel.offsets[j].map(S::lit);
                let dp = d_p[j];
                d_p[p] = rotation::add(&d_p[p], &dp);
                let local = &fwd.decodes[j].matrix;
                let dg = d_global[j];
                let from_child = rotation::matmul_bt(&dg, local);
                for r in 0..3 {
                    for c in 0..3 {
                        d_global[p][r][c] = d_global[p][r][c] + dp[r] * off[c] + from_child[r][c];
                    }
                }
                rotation::matmul_at(&fwd.global[p], &dg)
            }
        };
        let r: &[S; 6] = rot6d[j * 6..j * 6 + 6].try_into().expect("six");
        let g = rotation::gram_schmidt_backward(r, &fwd.decodes[j], &d_local);
        d_rot[j * 6..j * 6 + 6].copy_from_slice(&g);
    }
    (d_rot, d_p[0])
}

/// Global joint positions for every frame.
pub fn forward_kinematics(pose: &PoseSequence, skel: &Skeleton) -> Result<JointPositions> {
    skel.check_pose_compatible()?;
    let mut data = Vec::with_capacity(pose.frames() * NUM_JOINTS * 3);
    for t in 0..pose.frames() {
        let rot: Vec<f64> = pose.rotations[t * POSE_DIM..(t + 1) * POSE_DIM]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let frame = fk_frame(skel, &rot, &pose.root(t).map(f64::from));
        data.extend(frame.positions.iter().flatten());
    }
    Ok(JointPositions { data })
}

/// Sparse headset/controller features, frames × 54.
///
/// Per tracker: global position, linear velocity `(p_t − p_{t−1})·fps`, global
/// rotation in 6D, and the 6D encoding of the frame-to-frame relative rotation
/// `R_{t−1}ᵀ R_t`. Frame 0 reuses frame 1's velocities.
pub fn build_tracker_input(pose: &PoseSequence, skel: &Skeleton, fps: f64) -> Result<Tensor<f32>> {
    skel.check_pose_compatible()?;
    let frames = pose.frames();
    if frames < 2 {
        return Err(Error::InvalidArgument(format!(
            "tracker features need at least 2 frames, got {frames}"
        )));
    }
    if !(fps > 0.0) {
        return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    let mut positions = Vec::with_capacity(frames);
    let mut orientations = Vec::with_capacity(frames);
    for t in 0..frames {
        let rot: Vec<f64> = pose.rotations[t * POSE_DIM..(t + 1) * POSE_DIM]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let fk = fk_frame(skel, &rot, &pose.root(t).map(f64::from));
        positions.push(TRACKED_JOINTS.map(|j| fk.positions[j]));
        orientations.push(TRACKED_JOINTS.map(|j| fk.global[j]));
    }

    let mut out = Vec::with_capacity(frames * INPUT_DIM);
    for t in 0..frames {
        // Velocities at frame 0 copy frame 1.
        let (prev, cur) = if t == 0 { (0, 1) } else { (t - 1, t) };
        for k in 0..TRACKED_JOINTS.len() {
            let p = positions[t][k];
            let v = rotation::scale(&rotation::sub(&positions[cur][k], &positions[prev][k]), fps);
            let theta = Rotation6D::from_matrix(&orientations[t][k]).0;
            let rel = rotation::matmul_at(&orientations[prev][k], &orientations[cur][k]);
            let omega = Rotation6D::from_matrix(&rel).0;
            out.extend(p.iter().chain(&v).chain(&theta).chain(&omega).map(|&x| x as f32));
        }
    }
    Tensor::new(&[frames, INPUT_DIM], out)
}
