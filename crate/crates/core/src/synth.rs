// SPDX-License-Identifier: Apache-2.0

//! Deterministic synthetic motion.
//!
//! Each joint's axis-angle vector is a sum of harmonics of one per-sequence
//! base frequency (so every sequence is periodic), amplitude falling as 1/k².
//! The root translates along a doubly smoothed random walk.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pose::{PoseSequence, NUM_JOINTS};
use crate::rotation::{axis_angle_to_matrix, Rotation6D};

/// Highest harmonic frequency allowed, Hz.
pub const MAX_FREQUENCY_HZ: f64 = 3.0;
const BASE_FREQUENCY_HZ: (f64, f64) = (0.4, 1.0);
const ROOT_HEIGHT: f64 = 1.0;
const WALK_SMOOTHING: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_sequences: usize,
    pub frames_per_sequence: usize,
    pub fps: f64,
    pub max_harmonics: usize,
    /// Peak per-axis joint angle of the fundamental, radians.
    pub amplitude_scale: f64,
    /// RMS horizontal root speed, m/s.
    pub root_speed_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_sequences: 8,
            frames_per_sequence: 480,
            fps: 60.0,
            max_harmonics: 3,
            amplitude_scale: 0.35,
            root_speed_scale: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.num_sequences == 0 {
            return bad("num_sequences must be positive");
        }
        if self.frames_per_sequence < 4 {
            return bad("frames_per_sequence must be at least 4");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps must be positive");
        }
        if self.max_harmonics == 0 {
            return bad("max_harmonics must be positive");
        }
        if !(self.amplitude_scale >= 0.0 && self.amplitude_scale.is_finite()) {
            return bad("amplitude_scale must be non-negative");
        }
        if !(self.root_speed_scale >= 0.0 && self.root_speed_scale.is_finite()) {
            return bad("root_speed_scale must be non-negative");
        }
        Ok(())
    }
}

/// SplitMix64 finaliser; derives independent per-item seeds.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Relative motion range per joint: the pelvis and spine move less than limbs.
fn joint_gain(j: usize) -> f64 {
    match j {
        0 => 0.3,
        3 | 6 | 9 => 0.4,
        12 | 15 => 0.6,
        _ => 1.0,
    }
}

struct Harmonic {
    freq: f64,
    amp: [f64; 3],
    phase: [f64; 3],
}

fn generate_one(cfg: &SynthConfig, index: usize) -> PoseSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, index as u64));
    let frames = cfg.frames_per_sequence;
    let f0 = rng.gen_range(BASE_FREQUENCY_HZ.0..BASE_FREQUENCY_HZ.1);
    let joints: Vec<Vec<Harmonic>> = (0..NUM_JOINTS)
        .map(|j| {
            (1..=cfg.max_harmonics)
                .filter(|&k| k as f64 * f0 <= MAX_FREQUENCY_HZ)
                .map(|k| {
                    let a = cfg.amplitude_scale * joint_gain(j) / (k * k) as f64;
                    Harmonic {
                        freq: k as f64 * f0,
                        amp: [0; 3].map(|_| a * rng.gen_range(-1.0..1.0)),
                        phase: [0; 3].map(|_| rng.gen_range(0.0..TAU)),
                    }
                })
                .collect()
        })
        .collect();

    let mut rotations = Vec::with_capacity(frames * NUM_JOINTS * 6);
    for t in 0..frames {
        let time = t as f64 / cfg.fps;
        for hs in &joints {
            let mut v = [0.0; 3];
            for h in hs {
                for (axis, vi) in v.iter_mut().enumerate() {
                    *vi += h.amp[axis] * (TAU * h.freq * time + h.phase[axis]).sin();
                }
            }
            let r = Rotation6D::from_matrix(&axis_angle_to_matrix(&v)).0;
            rotations.extend(r.map(|x| x as f32));
        }
    }

    // Smooth twice so acceleration, not only velocity, is continuous.
    let mut accel = [0.0; 3];
    let mut vel = vec![[0.0; 3]; frames];
    let mut v = [0.0; 3];
    for slot in vel.iter_mut() {
        for k in 0..3 {
            let noise: f64 = rng.gen_range(-1.0..1.0);
            accel[k] += WALK_SMOOTHING * (noise - accel[k]);
            v[k] += WALK_SMOOTHING * (accel[k] - v[k]);
        }
        *slot = [v[0], v[1] * 0.1, v[2]];
    }
    let rms = (vel.iter().map(|v| v[0] * v[0] + v[2] * v[2]).sum::<f64>() / frames as f64).sqrt();
    let gain = if rms > 0.0 { cfg.root_speed_scale / rms } else { 0.0 };
    let mut root = Vec::with_capacity(frames * 3);
    let mut p = [0.0, ROOT_HEIGHT, 0.0];
    for v in &vel {
        root.extend(p.map(|x| x as f32));
        for k in 0..3 {
            p[k] += v[k] * gain / cfg.fps;
        }
    }
    PoseSequence::new(rotations, root).expect("consistent sizes")
}

/// `cfg.num_sequences` sequences; sequence `i` depends only on `(seed, i)`.
pub fn generate_motion(cfg: &SynthConfig) -> Result<Vec<PoseSequence>> {
    cfg.validate()?;
    Ok((0..cfg.num_sequences)
        .into_par_iter()
        .map(|i| generate_one(cfg, i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{forward_kinematics, Skeleton};
    use crate::metrics::jitter;
    use crate::rotation::orthonormality_error;

    fn small() -> SynthConfig {
        SynthConfig {
            num_sequences: 3,
            frames_per_sequence: 120,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_motion(&small()).unwrap(), generate_motion(&small()).unwrap());
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(generate_motion(&small()).unwrap(), generate_motion(&other).unwrap());
    }

    #[test]
    fn prefix_independent_of_count() {
        let a = generate_motion(&small()).unwrap();
        let b = generate_motion(&SynthConfig {
            num_sequences: 1,
            ..small()
        })
        .unwrap();
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn zero_amplitude_is_rest() {
        let cfg = SynthConfig {
            amplitude_scale: 0.0,
            ..small()
        };
        let rest = PoseSequence::rest(cfg.frames_per_sequence);
        for s in generate_motion(&cfg).unwrap() {
            assert_eq!(s.rotations, rest.rotations);
        }
    }

    #[test]
    fn valid_rotations_and_bounded_jitter() {
        let skel = Skeleton::default();
        let cfg = SynthConfig::default();
        for s in generate_motion(&cfg).unwrap() {
            for t in 0..s.frames() {
                for j in 0..NUM_JOINTS {
                    assert!(orthonormality_error(&s.rotation_matrix(t, j)) < 1e-6);
                }
            }
            let j = jitter(&forward_kinematics(&s, &skel).unwrap(), cfg.fps).unwrap();
            assert!(j.is_finite() && j < 20.0, "{j}");
        }
    }

    #[test]
    fn invalid_config() {
        assert!(generate_motion(&SynthConfig {
            num_sequences: 0,
            ..small()
        })
        .is_err());
        assert!(generate_motion(&SynthConfig {
            frames_per_sequence: 3,
            ..small()
        })
        .is_err());
    }
}
