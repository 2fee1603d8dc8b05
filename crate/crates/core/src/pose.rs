// SPDX-License-Identifier: Apache-2.0

use crate::error::{Error, Result};
use crate::rotation::{self, Mat3, Rotation6D};
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 22;
/// Flattened 6D rotations per frame (22 × 6).
pub const POSE_DIM: usize = NUM_JOINTS * 6;

/// Per-frame local joint rotations (6D) plus root translation in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    /// frames × 22 × 6, row-major.
    pub rotations: Vec<f32>,
    /// frames × 3.
    pub root_translation: Vec<f32>,
}

impl PoseSequence {
    pub fn new(rotations: Vec<f32>, root_translation: Vec<f32>) -> Result<Self> {
        if !rotations.len().is_multiple_of(POSE_DIM) {
            return Err(Error::shape(
                "PoseSequence",
                format!("{} rotation values is not a multiple of {POSE_DIM}", rotations.len()),
            ));
        }
        let frames = rotations.len() / POSE_DIM;
        if root_translation.len() != frames * 3 {
            return Err(Error::shape(
                "PoseSequence",
                format!("{frames} frames but {} translation values", root_translation.len()),
            ));
        }
        Ok(Self {
            rotations,
            root_translation,
        })
    }

    /// Every joint at identity, root at the origin.
    pub fn rest(frames: usize) -> Self {
        let id = Rotation6D::<f32>::identity().0;
        Self {
            rotations: (0..frames * NUM_JOINTS).flat_map(|_| id).collect(),
            root_translation: vec![0.0; frames * 3],
        }
    }

    pub fn frames(&self) -> usize {
        self.rotations.len() / POSE_DIM
    }

    pub fn rotation(&self, frame: usize, joint: usize) -> [f32; 6] {
        let o = frame * POSE_DIM + joint * 6;
        self.rotations[o..o + 6].try_into().expect("six values")
    }

    pub fn set_rotation(&mut self, frame: usize, joint: usize, r: [f32; 6]) {
        let o = frame * POSE_DIM + joint * 6;
        self.rotations[o..o + 6].copy_from_slice(&r);
    }

    /// Decoded local rotation (computed in f64, degeneracy clamped).
    pub fn rotation_matrix(&self, frame: usize, joint: usize) -> Mat3<f64> {
        let r = self.rotation(frame, joint).map(f64::from);
        rotation::gram_schmidt(&r, 1e-12).matrix
    }

    pub fn root(&self, frame: usize) -> [f32; 3] {
        self.root_translation[frame * 3..frame * 3 + 3]
            .try_into()
            .expect("three values")
    }

    /// Copy of frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames() {
            return Err(Error::InvalidArgument(format!(
                "frames {start}..{} outside sequence of {}",
                start + len,
                self.frames()
            )));
        }
        Ok(Self {
            rotations: self.rotations[start * POSE_DIM..(start + len) * POSE_DIM].to_vec(),
            root_translation: self.root_translation[start * 3..(start + len) * 3].to_vec(),
        })
    }

    /// Frames in reverse order.
    pub fn reversed(&self) -> Self {
        let t = self.frames();
        let mut out = self.clone();
        for f in 0..t {
            let src = t - 1 - f;
            out.rotations[f * POSE_DIM..(f + 1) * POSE_DIM]
                .copy_from_slice(&self.rotations[src * POSE_DIM..(src + 1) * POSE_DIM]);
            out.root_translation[f * 3..f * 3 + 3].copy_from_slice(&self.root_translation[src * 3..src * 3 + 3]);
        }
        out
    }

    /// Rotations as a frames × 132 tensor.
    pub fn rotations_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.frames(), POSE_DIM], self.rotations.clone()).expect("consistent")
    }
}

/// Global joint positions, frames × 22 × 3, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPositions {
    pub data: Vec<f64>,
}

impl JointPositions {
    pub fn frames(&self) -> usize {
        self.data.len() / (NUM_JOINTS * 3)
    }

    pub fn at(&self, frame: usize, joint: usize) -> [f64; 3] {
        let o = (frame * NUM_JOINTS + joint) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}
