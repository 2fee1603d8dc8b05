// SPDX-License-Identifier: Apache-2.0

//! Whole-sequence prediction and evaluation.
//!
//! A sequence is covered by consecutive windows of the model's length; a final
//! partial window is aligned to the sequence end and contributes only the
//! frames not already predicted. Root translation comes from ground truth.

use rayon::prelude::*;

use crate::error::Result;
use crate::kinematics::Skeleton;
use crate::metrics::{compute_metrics, MetricReport, MetricTable};
use crate::model::PoseModel;
use crate::pose::{PoseSequence, POSE_DIM};
use crate::tensor::Tensor;
use crate::window::SequenceFeatures;

/// Window start frames covering `frames` frames.
pub fn cover_starts(frames: usize, window: usize) -> Vec<usize> {
    if frames <= window {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..frames / window).map(|k| k * window).collect();
    if !frames.is_multiple_of(window) {
        starts.push(frames - window);
    }
    starts
}

/// Predicted local rotations for a whole sequence, with ground-truth root translation.
pub fn predict_sequence(model: &PoseModel<f32>, seq: &SequenceFeatures) -> Result<PoseSequence> {
    let frames = seq.pose.frames();
    let window = model.config.window.min(frames);
    let cols = seq.input.rows_cols().1;
    let mut rotations = vec![0.0f32; frames * POSE_DIM];
    let mut covered = 0;
    for start in cover_starts(frames, window) {
        let input = Tensor::new(
            &[window, cols],
            seq.input.data()[start * cols..(start + window) * cols].to_vec(),
        )?;
        let out = model.predict(&input)?;
        // Frames before `covered` were already written by the previous window.
        let skip = covered - start;
        rotations[covered * POSE_DIM..(start + window) * POSE_DIM].copy_from_slice(&out.data()[skip * POSE_DIM..]);
        covered = start + window;
    }
    PoseSequence::new(rotations, seq.pose.root_translation.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_sequence: Vec<(String, MetricReport)>,
    /// Mean of the per-sequence rows.
    pub aggregate: MetricReport,
    /// Ground truth scored against itself: zero errors and the data's own jitter.
    pub ground_truth: MetricReport,
}

impl EvalReport {
    pub fn table(&self) -> MetricTable {
        let mut t = MetricTable::default();
        for (name, r) in &self.per_sequence {
            t.push(name.clone(), *r);
        }
        t.push("mean", self.aggregate);
        t.push("GT", self.ground_truth);
        t
    }
}

/// Scores one prediction per sequence, given or computed by `model`.
pub fn evaluate(
    model: Option<&PoseModel<f32>>,
    seqs: &[(String, SequenceFeatures)],
    skel: &Skeleton,
    fps: f64,
) -> Result<EvalReport> {
    let rows: Vec<(String, MetricReport, MetricReport)> = seqs
        .par_iter()
        .map(|(name, s)| {
            let pred = match model {
                Some(m) => predict_sequence(m, s)?,
                None => s.pose.clone(),
            };
            let r = compute_metrics(&pred, &s.pose, skel, fps)?;
            let gt = compute_metrics(&s.pose, &s.pose, skel, fps)?;
            Ok((name.clone(), r, gt))
        })
        .collect::<Result<_>>()?;
    let per: Vec<MetricReport> = rows.iter().map(|r| r.1).collect();
    let gts: Vec<MetricReport> = rows.iter().map(|r| r.2).collect();
    Ok(EvalReport {
        aggregate: MetricReport::mean(&per).unwrap_or_default(),
        ground_truth: MetricReport::mean(&gts).unwrap_or_default(),
        per_sequence: rows.into_iter().map(|(n, r, _)| (n, r)).collect(),
    })
}
