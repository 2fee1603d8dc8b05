// SPDX-License-Identifier: Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kinematics::{build_tracker_input, Skeleton};
use crate::loss::LossTarget;
use crate::pose::PoseSequence;
use crate::tensor::{Scalar, Tensor};

/// Fixed-length windows as `(sequence, start frame)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSet {
    pub length: usize,
    pub windows: Vec<(usize, usize)>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Every in-bounds window of `length` frames at the given stride.
pub fn window_dataset(seqs: &[PoseSequence], length: usize, stride: usize) -> Result<WindowSet> {
    if stride == 0 || length == 0 {
        return Err(Error::InvalidArgument(
            "window length and stride must be positive".into(),
        ));
    }
    let mut windows = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        let f = s.frames();
        if f < length {
            return Err(Error::InvalidArgument(format!(
                "sequence {i} has {f} frames, shorter than the window length {length}"
            )));
        }
        windows.extend((0..=(f - length) / stride).map(|k| (i, k * stride)));
    }
    Ok(WindowSet { length, windows })
}

/// One training example: tracker features plus loss targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<S: Scalar = f32> {
    pub input: Tensor<S>,
    pub target: LossTarget<S>,
}

/// Tracker features are computed over the whole sequence, then windowed, so the
/// first frame of a window still sees a real previous frame.
#[derive(Debug, Clone)]
pub struct SequenceFeatures {
    pub pose: PoseSequence,
    pub input: Tensor<f32>,
}

impl SequenceFeatures {
    pub fn new(pose: PoseSequence, skel: &Skeleton, fps: f64) -> Result<Self> {
        let input = build_tracker_input(&pose, skel, fps)?;
        Ok(Self { pose, input })
    }

    /// Copy of frames `start..start + len`.
    pub fn sample<S: Scalar>(&self, start: usize, len: usize, skel: &Skeleton) -> Result<Sample<S>> {
        let pose = self.pose.slice(start, len)?;
        let cols = self.input.rows_cols().1;
        let input = Tensor::new(
            &[len, cols],
            self.input.data()[start * cols..(start + len) * cols].to_vec(),
        )?;
        Ok(Sample {
            input: input.cast(),
            target: LossTarget::new(&pose, skel)?,
        })
    }
}

/// Disjoint train/test index lists; the test side gets `round(n · test_fraction)`
/// sequences after a seeded shuffle.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} outside [0, 1]"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let test = idx.split_off(n - n_test);
    let (mut train, mut test) = (idx, test);
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
