// SPDX-License-Identifier: Apache-2.0

//! Evaluation metrics, reported in the column order
//! MPJRE, MPJPE, MPJVE, Hand PE, Upper PE, Lower PE, Root PE, Jitter.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, Skeleton, HAND_JOINTS, LOWER_JOINTS, ROOT_JOINTS, UPPER_JOINTS};
use crate::pose::{JointPositions, PoseSequence, NUM_JOINTS};
use crate::rotation;

pub const METRIC_NAMES: [&str; 8] = [
    "MPJRE", "MPJPE", "MPJVE", "Hand PE", "Upper PE", "Lower PE", "Root PE", "Jitter",
];

/// Units: degrees, cm, cm/s, cm, cm, cm, cm, 10²·m/s³.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub mpjre: f64,
    pub mpjpe: f64,
    pub mpjve: f64,
    pub hand_pe: f64,
    pub upper_pe: f64,
    pub lower_pe: f64,
    pub root_pe: f64,
    pub jitter: f64,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 8] {
        [
            self.mpjre,
            self.mpjpe,
            self.mpjve,
            self.hand_pe,
            self.upper_pe,
            self.lower_pe,
            self.root_pe,
            self.jitter,
        ]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        Self {
            mpjre: v[0],
            mpjpe: v[1],
            mpjve: v[2],
            hand_pe: v[3],
            upper_pe: v[4],
            lower_pe: v[5],
            root_pe: v[6],
            jitter: v[7],
        }
    }

    /// Column-wise mean; `None` for an empty slice.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let mut acc = [0.0; 8];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / reports.len() as f64)))
    }
}

/// Labelled rows rendered as CSV (header included) or aligned text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<(String, MetricReport)>,
}

impl MetricTable {
    pub fn push(&mut self, label: impl Into<String>, report: MetricReport) {
        self.rows.push((label.into(), report));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name");
        for n in METRIC_NAMES {
            out.push(',');
            out.push_str(&n.to_lowercase().replace(' ', "_"));
        }
        out.push('\n');
        for (label, r) in &self.rows {
            out.push_str(label);
            for v in r.values() {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<w$}", "Method");
        for n in METRIC_NAMES {
            let _ = write!(out, " {n:>9}");
        }
        out.push('\n');
        for (label, r) in &self.rows {
            let _ = write!(out, "{label:<w$}");
            for v in r.values() {
                let _ = write!(out, " {v:>9.2}");
            }
            out.push('\n');
        }
        out
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn subset_error(p: &JointPositions, g: &JointPositions, joints: &[usize]) -> f64 {
    let frames = p.frames();
    let mut sum = 0.0;
    for t in 0..frames {
        for &j in joints {
            sum += dist(p.at(t, j), g.at(t, j));
        }
    }
    sum / (frames * joints.len()) as f64
}

/// Mean magnitude of the third time derivative of joint positions, by forward
/// third differences, in 10²·m/s³.
pub fn jitter(p: &JointPositions, fps: f64) -> Result<f64> {
    let frames = p.frames();
    if frames < 4 {
        return Err(Error::InvalidArgument(format!(
            "jitter needs at least 4 frames, got {frames}"
        )));
    }
    let mut sum = 0.0;
    for t in 0..frames - 3 {
        for j in 0..NUM_JOINTS {
            let [a, b, c, d] = [p.at(t, j), p.at(t + 1, j), p.at(t + 2, j), p.at(t + 3, j)];
            let mut sq = 0.0;
            for k in 0..3 {
                let d3 = (d[k] - 3.0 * c[k] + 3.0 * b[k] - a[k]) * fps.powi(3);
                sq += d3 * d3;
            }
            sum += sq.sqrt();
        }
    }
    Ok(sum / ((frames - 3) * NUM_JOINTS) as f64 / 100.0)
}

/// Metrics of `pred` against `gt`. Positions come from forward kinematics of
/// each sequence with its own root translation.
pub fn compute_metrics(pred: &PoseSequence, gt: &PoseSequence, skel: &Skeleton, fps: f64) -> Result<MetricReport> {
    let frames = gt.frames();
    if pred.frames() != frames {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} frames, ground truth {frames}",
            pred.frames()
        )));
    }
    if frames < 4 {
        return Err(Error::InvalidArgument(format!(
            "metrics need at least 4 frames, got {frames}"
        )));
    }
    if !(fps > 0.0) {
        return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    let pp = forward_kinematics(pred, skel)?;
    let gp = forward_kinematics(gt, skel)?;

    let mut angle = 0.0;
    for t in 0..frames {
        for j in 0..NUM_JOINTS {
            angle += rotation::geodesic_angle(&pred.rotation_matrix(t, j), &gt.rotation_matrix(t, j));
        }
    }
    Ok(MetricReport {
        mpjre: (angle / (frames * NUM_JOINTS) as f64).to_degrees(),
        ..position_metrics(&pp, &gp, fps)?
    })
}

/// Every metric except MPJRE (left at zero), from global joint positions.
pub fn position_metrics(pp: &JointPositions, gp: &JointPositions, fps: f64) -> Result<MetricReport> {
    let frames = gp.frames();
    if pp.frames() != frames || pp.data.len() != gp.data.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} frames, ground truth {frames}",
            pp.frames()
        )));
    }
    if frames < 4 {
        return Err(Error::InvalidArgument(format!(
            "metrics need at least 4 frames, got {frames}"
        )));
    }
    let mut vel = 0.0;
    for t in 1..frames {
        for j in 0..NUM_JOINTS {
            let (p0, p1, g0, g1) = (pp.at(t - 1, j), pp.at(t, j), gp.at(t - 1, j), gp.at(t, j));
            let mut sq = 0.0;
            for k in 0..3 {
                let dv = ((p1[k] - p0[k]) - (g1[k] - g0[k])) * fps;
                sq += dv * dv;
            }
            vel += sq.sqrt();
        }
    }
    let all: Vec<usize> = (0..NUM_JOINTS).collect();
    Ok(MetricReport {
        mpjre: 0.0,
        mpjpe: subset_error(pp, gp, &all) * 100.0,
        mpjve: vel / ((frames - 1) * NUM_JOINTS) as f64 * 100.0,
        hand_pe: subset_error(pp, gp, &HAND_JOINTS) * 100.0,
        upper_pe: subset_error(pp, gp, &UPPER_JOINTS) * 100.0,
        lower_pe: subset_error(pp, gp, &LOWER_JOINTS) * 100.0,
        root_pe: subset_error(pp, gp, &ROOT_JOINTS) * 100.0,
        jitter: jitter(pp, fps)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moving(frames: usize, v: [f32; 3]) -> PoseSequence {
        let mut s = PoseSequence::rest(frames);
        for t in 0..frames {
            for k in 0..3 {
                s.root_translation[t * 3 + k] = v[k] * t as f32 / 60.0;
            }
        }
        s
    }

    #[test]
    fn identical_is_zero() {
        let skel = Skeleton::default();
        let s = moving(6, [1.0, 0.0, 0.5]);
        let r = compute_metrics(&s, &s, &skel, 60.0).unwrap();
        assert_eq!(r.values()[..7], [0.0; 7]);
    }

    #[test]
    fn uniform_offset() {
        let skel = Skeleton::default();
        let gt = PoseSequence::rest(5);
        let mut pred = gt.clone();
        for t in 0..5 {
            pred.root_translation[t * 3 + 1] = 0.01;
        }
        let r = compute_metrics(&pred, &gt, &skel, 60.0).unwrap();
        assert!((r.mpjpe - 1.0).abs() < 1e-6);
        assert!((r.root_pe - 1.0).abs() < 1e-6 && (r.hand_pe - 1.0).abs() < 1e-6);
        assert_eq!(r.mpjve, 0.0);
        assert_eq!(r.mpjre, 0.0);
    }

    #[test]
    fn too_short() {
        let skel = Skeleton::default();
        let s = PoseSequence::rest(3);
        assert!(compute_metrics(&s, &s, &skel, 60.0).is_err());
    }

    #[test]
    fn mean_and_table() {
        let a = MetricReport::from_values([1.0; 8]);
        let b = MetricReport::from_values([3.0; 8]);
        assert_eq!(
            MetricReport::mean(&[a, b]).unwrap(),
            MetricReport::from_values([2.0; 8])
        );
        assert!(MetricReport::mean(&[]).is_none());
        let mut t = MetricTable::default();
        t.push("seq0", a);
        let csv = t.to_csv();
        assert!(csv.starts_with("name,mpjre,mpjpe,mpjve,hand_pe,upper_pe,lower_pe,root_pe,jitter\n"));
        assert!(csv.contains("seq0,1.000000"));
        assert!(t.to_text().lines().next().unwrap().contains("MPJRE"));
    }
}
