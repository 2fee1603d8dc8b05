// SPDX-License-Identifier: Apache-2.0

//! Training objective: `α·L_rot + β·L_pos + γ·L_ori`, each term a mean of
//! per-item L2 norms.
//!
//! * `L_rot`: 6D residuals of the 21 non-root local rotations.
//! * `L_pos`: forward-kinematics position residuals of all 22 joints.
//! * `L_ori`: 6D residual of the root (global) orientation.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kinematics::{fk_frame, Skeleton};
use crate::pose::{PoseSequence, NUM_JOINTS, POSE_DIM};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.02,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.beta, self.gamma]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_rot: f64,
    pub l_pos: f64,
    pub l_ori: f64,
    pub total: f64,
}

/// Ground truth for one window, with positions precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTarget<S: Scalar = f32> {
    /// T×132.
    pub rotations: Tensor<S>,
    /// T×3.
    pub root: Tensor<S>,
    /// T×66.
    pub positions: Tensor<S>,
}

impl<S: Scalar> LossTarget<S> {
    pub fn new(gt: &PoseSequence, skel: &Skeleton) -> Result<Self> {
        skel.check_pose_compatible()?;
        let t = gt.frames();
        let rot: Vec<S> = gt.rotations.iter().map(|&v| S::lit(f64::from(v))).collect();
        let root: Vec<S> = gt.root_translation.iter().map(|&v| S::lit(f64::from(v))).collect();
        let mut positions = Vec::with_capacity(t * NUM_JOINTS * 3);
        for f in 0..t {
            let r = [root[f * 3], root[f * 3 + 1], root[f * 3 + 2]];
            let fk = fk_frame(skel, &rot[f * POSE_DIM..(f + 1) * POSE_DIM], &r);
            positions.extend(fk.positions.iter().flatten());
        }
        Ok(Self {
            rotations: Tensor::new(&[t, POSE_DIM], rot)?,
            root: Tensor::new(&[t, 3], root)?,
            positions: Tensor::new(&[t, NUM_JOINTS * 3], positions)?,
        })
    }

    pub fn frames(&self) -> usize {
        self.rotations.rows_cols().0
    }
}

/// Loss nodes added to a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_rot: Var,
    pub l_pos: Var,
    pub l_ori: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<S: Scalar>(&self, g: &Graph<S>) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0].f64();
        LossBreakdown {
            l_rot: v(self.l_rot),
            l_pos: v(self.l_pos),
            l_ori: v(self.l_ori),
            total: v(self.total),
        }
    }
}

fn mean_row_norm<S: Scalar>(g: &mut Graph<S>, residual: Var, width: usize) -> Result<Var> {
    let n = g.value(residual).numel();
    let r = g.reshape(residual, &[n / width, width])?;
    let norms = g.row_norms(r)?;
    g.mean(norms)
}

/// Builds the loss for `pred` (T×132) against `target`.
pub fn loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    pred: Var,
    target: &LossTarget<S>,
    skel: &Skeleton,
    w: &LossWeights,
) -> Result<LossVars> {
    w.validate()?;
    let (t, c) = g.value(pred).rows_cols();
    if c != POSE_DIM || t != target.frames() {
        return Err(Error::shape(
            "loss",
            format!("prediction {t}×{c}, target {}×{POSE_DIM}", target.frames()),
        ));
    }
    let gt_rot = g.constant(target.rotations.clone());
    let gt_root = g.constant(target.root.clone());
    let gt_pos = g.constant(target.positions.clone());

    let diff = g.sub(pred, gt_rot)?;
    let body = g.slice_cols(diff, 6, POSE_DIM - 6)?;
    let l_rot = mean_row_norm(g, body, 6)?;
    let root = g.slice_cols(diff, 0, 6)?;
    let l_ori = mean_row_norm(g, root, 6)?;

    let pos = g.forward_kinematics(pred, gt_root, skel)?;
    let dpos = g.sub(pos, gt_pos)?;
    let l_pos = mean_row_norm(g, dpos, 3)?;

    let a = g.scale(l_rot, S::lit(w.alpha))?;
    let b = g.scale(l_pos, S::lit(w.beta))?;
    let o = g.scale(l_ori, S::lit(w.gamma))?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, o)?;
    Ok(LossVars {
        l_rot,
        l_pos,
        l_ori,
        total,
    })
}

/// Loss of a predicted sequence against ground truth, evaluated in f64.
/// The prediction's root translation is ignored; ground truth places the root.
pub fn compute_loss(pred: &PoseSequence, gt: &PoseSequence, skel: &Skeleton, w: &LossWeights) -> Result<LossBreakdown> {
    if pred.frames() != gt.frames() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} frames, ground truth {}",
            pred.frames(),
            gt.frames()
        )));
    }
    let target = LossTarget::<f64>::new(gt, skel)?;
    let mut g = Graph::new();
    let p = g.constant(pred.rotations_tensor().cast());
    let vars = loss_graph(&mut g, p, &target, skel, w)?;
    Ok(vars.breakdown(&g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_have_zero_loss() {
        let skel = Skeleton::default();
        let mut gt = PoseSequence::rest(3);
        gt.set_rotation(1, 4, [0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        let l = compute_loss(&gt, &gt, &skel, &LossWeights::default()).unwrap();
        assert_eq!(l, LossBreakdown::default());
    }

    #[test]
    fn root_only_difference_is_masked_by_gamma() {
        // A rescaled root encoding decodes to the same rotation, so only L_ori sees it.
        let skel = Skeleton::default();
        let gt = PoseSequence::rest(2);
        let mut pred = gt.clone();
        pred.set_rotation(0, 0, [2.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let w = LossWeights {
            gamma: 0.0,
            ..LossWeights::default()
        };
        let l = compute_loss(&pred, &gt, &skel, &w).unwrap();
        assert_eq!(l.total, 0.0);
        assert!((l.l_ori - 2f64.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum() {
        let skel = Skeleton::default();
        let gt = PoseSequence::rest(2);
        let mut pred = gt.clone();
        pred.set_rotation(0, 0, [0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        pred.set_rotation(1, 3, [0.5, 0.5, 0.0, 0.0, 1.0, 0.0]);
        let w = LossWeights {
            alpha: 0.7,
            beta: 1.3,
            gamma: 0.02,
        };
        let l = compute_loss(&pred, &gt, &skel, &w).unwrap();
        assert!(l.l_rot > 0.0 && l.l_pos > 0.0 && l.l_ori > 0.0);
        let expect = 0.7 * l.l_rot + 1.3 * l.l_pos + 0.02 * l.l_ori;
        assert!((l.total - expect).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatch_and_negative_weights() {
        let skel = Skeleton::default();
        let a = PoseSequence::rest(2);
        let b = PoseSequence::rest(3);
        assert!(compute_loss(&a, &b, &skel, &LossWeights::default()).is_err());
        let w = LossWeights {
            beta: -1.0,
            ..LossWeights::default()
        };
        assert!(compute_loss(&a, &a, &skel, &w).is_err());
    }
}
