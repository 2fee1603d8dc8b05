// SPDX-License-Identifier: Apache-2.0

//! Continuous 6D rotation encoding and small 3×3 helpers.
//!
//! A rotation is stored as its first two columns, column-major:
//! `[R00, R10, R20, R01, R11, R21]`. Decoding re-orthonormalises with
//! Gram–Schmidt and takes the cross product for the third column, so any pair
//! of non-parallel vectors maps to a proper rotation.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Row-major 3×3 matrix, `m[row][col]`.
pub type Mat3<S> = [[S; 3]; 3];
pub type Vec3<S> = [S; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D<S>(pub [S; 6]);

impl<S: Scalar> Rotation6D<S> {
    pub fn identity() -> Self {
        let (o, z) = (S::one(), S::zero());
        Self([o, z, z, z, o, z])
    }

    pub fn from_matrix(m: &Mat3<S>) -> Self {
        Self([m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]])
    }

    pub fn to_matrix(&self) -> Result<Mat3<S>> {
        rot6d_to_matrix(&self.0)
    }
}

/// Inputs whose first column is shorter than this, or whose second column has
/// less than this much component orthogonal to the first, are rejected.
const DEGENERATE_EPS: f64 = 1e-9;

/// Strict decode: errors on zero or parallel columns.
pub fn rot6d_to_matrix<S: Scalar>(r: &[S; 6]) -> Result<Mat3<S>> {
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let eps = S::lit(DEGENERATE_EPS);
    let n1 = norm(&a1);
    if !(n1 > eps) {
        return Err(Error::DegenerateRotation("first column has zero length"));
    }
    let b1 = scale(&a1, S::one() / n1);
    let u = sub(&a2, &scale(&b1, dot(&b1, &a2)));
    if !(norm(&u) > eps * norm(&a2).max(S::one())) {
        return Err(Error::DegenerateRotation("columns are parallel or second is zero"));
    }
    Ok(gram_schmidt(r, S::zero()).matrix)
}

/// Intermediate values of a decode, kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct Decode6D<S> {
    pub matrix: Mat3<S>,
    n1: S,
    nu: S,
    dot12: S,
}

/// Gram–Schmidt decode with norms clamped below at `eps`; never fails, which
/// keeps training robust when a prediction passes near a degenerate input.
pub fn gram_schmidt<S: Scalar>(r: &[S; 6], eps: S) -> Decode6D<S> {
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let n1 = norm(&a1).max(eps);
    let b1 = scale(&a1, S::one() / n1);
    let dot12 = dot(&b1, &a2);
    let u = sub(&a2, &scale(&b1, dot12));
    let nu = norm(&u).max(eps);
    let b2 = scale(&u, S::one() / nu);
    let b3 = cross(&b1, &b2);
    let matrix = [[b1[0], b2[0], b3[0]], [b1[1], b2[1], b3[1]], [b1[2], b2[2], b3[2]]];
    Decode6D { matrix, n1, nu, dot12 }
}

/// Pulls a gradient on the decoded matrix back to the six inputs.
pub fn gram_schmidt_backward<S: Scalar>(r: &[S; 6], fwd: &Decode6D<S>, d_m: &Mat3<S>) -> [S; 6] {
    let m = &fwd.matrix;
    let col = |mat: &Mat3<S>, c: usize| [mat[0][c], mat[1][c], mat[2][c]];
    let (b1, b2) = (col(m, 0), col(m, 1));
    let (mut g1, mut g2) = (col(d_m, 0), col(d_m, 1));
    let g3 = col(d_m, 2);
    let a2 = [r[3], r[4], r[5]];

    // b3 = b1 × b2
    g1 = add(&g1, &cross(&b2, &g3));
    g2 = add(&g2, &cross(&g3, &b1));

    // b2 = u / |u|
    let gu = scale(&sub(&g2, &scale(&b2, dot(&b2, &g2))), S::one() / fwd.nu);

    // u = a2 - (b1·a2) b1
    let b1_gu = dot(&b1, &gu);
    let ga2 = sub(&gu, &scale(&b1, b1_gu));
    g1 = sub(&g1, &add(&scale(&gu, fwd.dot12), &scale(&a2, b1_gu)));

    // b1 = a1 / |a1|
    let ga1 = scale(&sub(&g1, &scale(&b1, dot(&b1, &g1))), S::one() / fwd.n1);

    [ga1[0], ga1[1], ga1[2], ga2[0], ga2[1], ga2[2]]
}

/// Rodrigues' formula for an axis-angle vector (direction = axis, length = angle).
pub fn axis_angle_to_matrix<S: Scalar>(v: &Vec3<S>) -> Mat3<S> {
    let theta = norm(v);
    let o = S::one();
    if theta < S::lit(1e-12) {
        // First-order: I + [v]×
        return [[o, -v[2], v[1]], [v[2], o, -v[0]], [-v[1], v[0], o]];
    }
    let k = scale(v, o / theta);
    let (s, c) = theta.sin_cos();
    let t = o - c;
    [
        [
            c + k[0] * k[0] * t,
            k[0] * k[1] * t - k[2] * s,
            k[0] * k[2] * t + k[1] * s,
        ],
        [
            k[1] * k[0] * t + k[2] * s,
            c + k[1] * k[1] * t,
            k[1] * k[2] * t - k[0] * s,
        ],
        [
            k[2] * k[0] * t - k[1] * s,
            k[2] * k[1] * t + k[0] * s,
            c + k[2] * k[2] * t,
        ],
    ]
}

/// Geodesic angle between two rotations, radians.
///
/// Uses the chord form `‖a − b‖_F = 2√2 · sin(θ/2)`, which is exactly zero for
/// identical inputs where the trace form loses precision.
pub fn geodesic_angle<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> S {
    let mut sq = S::zero();
    for i in 0..3 {
        for j in 0..3 {
            let d = a[i][j] - b[i][j];
            sq = sq + d * d;
        }
    }
    let half_chord = (sq.sqrt() / S::lit(8f64.sqrt())).min(S::one());
    S::lit(2.0) * half_chord.asin()
}

pub fn identity<S: Scalar>() -> Mat3<S> {
    let (o, z) = (S::one(), S::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn matmul<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// `a · bᵀ`
pub fn matmul_bt<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    matmul(a, &transpose(b))
}

/// `aᵀ · b`
pub fn matmul_at<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    matmul(&transpose(a), b)
}

pub fn transpose<S: Scalar>(m: &Mat3<S>) -> Mat3<S> {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn apply<S: Scalar>(m: &Mat3<S>, v: &Vec3<S>) -> Vec3<S> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn det<S: Scalar>(m: &Mat3<S>) -> S {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Largest entry of `|RᵀR − I|`.
pub fn orthonormality_error<S: Scalar>(m: &Mat3<S>) -> f64 {
    let g = matmul_at(m, m);
    let mut worst = 0.0f64;
    for (i, row) in g.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v.f64() - target).abs());
        }
    }
    worst
}

pub fn dot<S: Scalar>(a: &Vec3<S>, b: &Vec3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<S: Scalar>(a: &Vec3<S>, b: &Vec3<S>) -> Vec3<S> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm<S: Scalar>(a: &Vec3<S>) -> S {
    dot(a, a).sqrt()
}

pub fn add<S: Scalar>(a: &Vec3<S>, b: &Vec3<S>) -> Vec3<S> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<S: Scalar>(a: &Vec3<S>, b: &Vec3<S>) -> Vec3<S> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<S: Scalar>(a: &Vec3<S>, s: S) -> Vec3<S> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_decodes() {
        let m = rot6d_to_matrix(&[1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(m, identity());
        let m = rot6d_to_matrix(&[2.0f64, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap();
        assert_eq!(m, identity());
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(rot6d_to_matrix(&[0.0f64; 6]).is_err());
        assert!(rot6d_to_matrix(&[1.0f64, 0.0, 0.0, 3.0, 0.0, 0.0]).is_err());
        assert!(rot6d_to_matrix(&[1.0f64, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn rodrigues_quarter_turn() {
        let m = axis_angle_to_matrix(&[0.0f64, 0.0, std::f64::consts::FRAC_PI_2]);
        let v = apply(&m, &[1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
        assert!((det(&m) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn round_trip_through_6d() {
        let m = axis_angle_to_matrix(&[0.3f64, -1.1, 0.7]);
        let back = Rotation6D::from_matrix(&m).to_matrix().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i][j] - back[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn geodesic_of_known_rotation() {
        let m = axis_angle_to_matrix(&[0.0f64, 0.4, 0.0]);
        assert!((geodesic_angle(&identity(), &m) - 0.4).abs() < 1e-12);
        assert_eq!(geodesic_angle(&m, &m), 0.0);
    }

    #[test]
    fn backward_matches_central_differences() {
        let r = [0.9f64, 0.2, -0.3, 0.1, 1.2, 0.4];
        // L = Σ W ⊙ R for a fixed weight W.
        let w = [[0.3, -0.7, 0.2], [1.1, 0.5, -0.4], [-0.2, 0.8, 0.6]];
        let loss = |r: &[f64; 6]| {
            let m = gram_schmidt(r, 0.0).matrix;
            (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| w[i][j] * m[i][j])
                .sum::<f64>()
        };
        let fwd = gram_schmidt(&r, 0.0);
        let g = gram_schmidt_backward(&r, &fwd, &w);
        let h = 1e-6;
        for k in 0..6 {
            let (mut p, mut m) = (r, r);
            p[k] += h;
            m[k] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "component {k}: {fd} vs {}", g[k]);
        }
    }
}
