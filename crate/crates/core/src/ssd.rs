// SPDX-License-Identifier: Apache-2.0

//! Selective state space sequence transformation with three interchangeable
//! evaluation orders.
//!
//! For a decay sequence `A`, input matrices `B`, `C` (T×N) and inputs `x` (T×D):
//!
//! ```text
//! h_t = A_t h_{t-1} + B_t x_tᵀ        h_0 = 0,  h_t ∈ R^{N×D}
//! y_t = C_tᵀ h_t
//! ```
//!
//! Unrolling gives `y = (F ⊙ C Bᵀ) x` with the lower-triangular decay matrix
//! `F_ij = ∏_{k=j+1}^{i} A_k` (unit diagonal, zero above it). The recurrent path
//! costs O(T·N·D), the dual (matrix) path O(T²·(N+D)), and the chunked path runs
//! the matrix form inside blocks while carrying the state between them.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-timestep decay.
#[derive(Debug, Clone, PartialEq)]
pub enum Decay<S: Scalar> {
    /// One scalar per step, shared by every state entry.
    Scalar(Vec<S>),
    /// One value per step and state row (T×N).
    Diagonal(Tensor<S>),
}

impl<S: Scalar> Decay<S> {
    fn len(&self) -> usize {
        match self {
            Decay::Scalar(a) => a.len(),
            Decay::Diagonal(a) => a.rows_cols().0,
        }
    }

    fn scalar(&self, op: &'static str) -> Result<&[S]> {
        match self {
            Decay::Scalar(a) => Ok(a),
            Decay::Diagonal(_) => Err(Error::InvalidArgument(format!("{op} requires a scalar decay per step"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SsdInputs<S: Scalar> {
    pub a: Decay<S>,
    pub b: Tensor<S>,
    pub c: Tensor<S>,
    pub x: Tensor<S>,
}

/// Sequence length, state size, channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsdDims {
    pub t: usize,
    pub n: usize,
    pub d: usize,
}

impl<S: Scalar> SsdInputs<S> {
    pub fn new(a: Decay<S>, b: Tensor<S>, c: Tensor<S>, x: Tensor<S>) -> Result<Self> {
        let inputs = Self { a, b, c, x };
        inputs.dims()?;
        Ok(inputs)
    }

    pub fn dims(&self) -> Result<SsdDims> {
        let (t, n) = self.b.rows_cols();
        let (tc, nc) = self.c.rows_cols();
        let (tx, d) = self.x.rows_cols();
        if self.b.shape().len() != 2 || self.c.shape().len() != 2 || self.x.shape().len() != 2 {
            return Err(Error::shape("ssd", "B, C and x must be matrices"));
        }
        if t == 0 {
            return Err(Error::shape("ssd", "empty sequence"));
        }
        if tc != t || tx != t || self.a.len() != t {
            return Err(Error::shape(
                "ssd",
                format!("sequence lengths disagree: A={}, B={t}, C={tc}, x={tx}", self.a.len()),
            ));
        }
        if nc != n {
            return Err(Error::shape("ssd", format!("B has N={n}, C has N={nc}")));
        }
        if let Decay::Diagonal(a) = &self.a {
            if a.rows_cols().1 != n {
                return Err(Error::shape("ssd", "diagonal decay must be T×N"));
            }
        }
        Ok(SsdDims { t, n, d })
    }
}

/// Hidden state `h` (N×D) after some step.
#[derive(Debug, Clone, PartialEq)]
pub struct SsdState<S: Scalar> {
    pub h: Tensor<S>,
}

impl<S: Scalar> SsdState<S> {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            h: Tensor::zeros(&[n, d]),
        }
    }
}

/// Lower-triangular T×T kernel: the decay matrix `F`, or the full mixing
/// matrix `H = F ⊙ C Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiseparableKernel<S: Scalar> {
    pub matrix: Tensor<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsdPath {
    Recurrent,
    Dual,
    Chunked(usize),
}

impl std::fmt::Display for SsdPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SsdPath::Recurrent => write!(f, "recurrent"),
            SsdPath::Dual => write!(f, "dual"),
            SsdPath::Chunked(c) => write!(f, "chunked{c}"),
        }
    }
}

impl std::str::FromStr for SsdPath {
    type Err = Error;

    /// `recurrent`, `dual`, `chunked` (chunk 64) or `chunked<Q>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(SsdPath::Recurrent),
            "dual" => Ok(SsdPath::Dual),
            "chunked" => Ok(SsdPath::Chunked(64)),
            _ => s
                .strip_prefix("chunked")
                .and_then(|q| q.parse().ok())
                .filter(|&q| q > 0)
                .map(SsdPath::Chunked)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown SSD path '{s}'"))),
        }
    }
}

pub fn ssd_forward<S: Scalar>(inputs: &SsdInputs<S>, path: SsdPath) -> Result<Tensor<S>> {
    match path {
        SsdPath::Recurrent => ssd_recurrent(inputs),
        SsdPath::Dual => ssd_dual(inputs),
        SsdPath::Chunked(chunk) => ssd_chunked(inputs, chunk),
    }
}

/// Runs the recurrence from `h_0 = 0`, calling `visit(t, h_t)` after each step.
fn scan<S: Scalar>(inputs: &SsdInputs<S>, mut visit: impl FnMut(usize, &[S]) -> Result<()>) -> Result<Tensor<S>> {
    let SsdDims { t: steps, n, d } = inputs.dims()?;
    let (b, c, x) = (inputs.b.data(), inputs.c.data(), inputs.x.data());
    let mut h = vec![S::zero(); n * d];
    let mut y = vec![S::zero(); steps * d];
    for t in 0..steps {
        let xt = &x[t * d..(t + 1) * d];
        for i in 0..n {
            let decay = match &inputs.a {
                Decay::Scalar(a) => a[t],
                Decay::Diagonal(a) => a.data()[t * n + i],
            };
            let bi = b[t * n + i];
            for (hv, &xv) in h[i * d..(i + 1) * d].iter_mut().zip(xt) {
                *hv = decay * *hv + bi * xv;
            }
        }
        let yt = &mut y[t * d..(t + 1) * d];
        for i in 0..n {
            let ci = c[t * n + i];
            for (yv, &hv) in yt.iter_mut().zip(&h[i * d..(i + 1) * d]) {
                *yv = *yv + ci * hv;
            }
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "ssd_recurrent" });
        }
        visit(t, &h)?;
    }
    Tensor::new(&[steps, d], y)
}

/// Linear-time evaluation. Supports scalar and diagonal decay.
pub fn ssd_recurrent<S: Scalar>(inputs: &SsdInputs<S>) -> Result<Tensor<S>> {
    scan(inputs, |_, _| Ok(()))
}

/// Like [`ssd_recurrent`], also returning the final state.
pub fn ssd_recurrent_with_state<S: Scalar>(inputs: &SsdInputs<S>) -> Result<(Tensor<S>, SsdState<S>)> {
    let SsdDims { t, n, d } = inputs.dims()?;
    let mut last = SsdState::zeros(n, d);
    let y = scan(inputs, |step, h| {
        if step + 1 == t {
            last.h.data_mut().copy_from_slice(h);
        }
        Ok(())
    })?;
    Ok((y, last))
}

/// `F_ij = ∏_{k=j+1}^{i} A_k` for `i > j`, exactly 1 on the diagonal, 0 above.
pub fn build_f<S: Scalar>(a: &[S]) -> Result<SemiseparableKernel<S>> {
    let t = a.len();
    if t == 0 {
        return Err(Error::InvalidArgument("decay sequence is empty".into()));
    }
    let mut f = Tensor::zeros(&[t, t]);
    let data = f.data_mut();
    for i in 0..t {
        fill_decay_row(a, i, &mut data[i * t..i * t + i + 1]);
    }
    Ok(SemiseparableKernel { matrix: f })
}

/// Writes `F_i0 … F_ii` into `row`.
#[inline]
fn fill_decay_row<S: Scalar>(a: &[S], i: usize, row: &mut [S]) {
    let mut acc = S::one();
    row[i] = acc;
    for j in (0..i).rev() {
        acc = acc * a[j + 1];
        row[j] = acc;
    }
}

/// Materialises `H = F ⊙ (C Bᵀ)` for scalar decay.
pub fn build_h<S: Scalar>(inputs: &SsdInputs<S>) -> Result<SemiseparableKernel<S>> {
    let a = inputs.a.scalar("build_h")?;
    let SsdDims { t, n, .. } = inputs.dims()?;
    let mut h = Tensor::zeros(&[t, t]);
    masked_gram(a, inputs.b.data(), inputs.c.data(), t, n, h.data_mut());
    Ok(SemiseparableKernel { matrix: h })
}

/// `out = F ⊙ (C Bᵀ)` over a block of `t` rows.
fn masked_gram<S: Scalar>(a: &[S], b: &[S], c: &[S], t: usize, n: usize, out: &mut [S]) {
    S::gemm(t, n, t, c, false, b, true, out, false);
    let mut decay = vec![S::zero(); t];
    for i in 0..t {
        fill_decay_row(a, i, &mut decay[..i + 1]);
        let row = &mut out[i * t..(i + 1) * t];
        for (v, &f) in row[..=i].iter_mut().zip(&decay[..=i]) {
            *v = *v * f;
        }
        row[i + 1..].fill(S::zero());
    }
}

/// Quadratic-time evaluation `y = (F ⊙ C Bᵀ) x`. Scalar decay only.
pub fn ssd_dual<S: Scalar>(inputs: &SsdInputs<S>) -> Result<Tensor<S>> {
    let a = inputs.a.scalar("ssd_dual")?;
    let SsdDims { t, n, d } = inputs.dims()?;
    let mut h = vec![S::zero(); t * t];
    masked_gram(a, inputs.b.data(), inputs.c.data(), t, n, &mut h);
    let mut y = Tensor::zeros(&[t, d]);
    S::gemm(t, t, d, &h, false, inputs.x.data(), false, y.data_mut(), false);
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "ssd_dual" });
    }
    Ok(y)
}

/// Block evaluation: the matrix form inside each block of `chunk` steps, the
/// recurrence across block boundaries. Scalar decay only.
pub fn ssd_chunked<S: Scalar>(inputs: &SsdInputs<S>, chunk: usize) -> Result<Tensor<S>> {
    let a = inputs.a.scalar("ssd_chunked")?;
    let SsdDims { t, n, d } = inputs.dims()?;
    if chunk == 0 || chunk > t {
        return Err(Error::InvalidArgument(format!("chunk size {chunk} outside 1..={t}")));
    }
    let (b, c, x) = (inputs.b.data(), inputs.c.data(), inputs.x.data());
    let mut y = Tensor::zeros(&[t, d]);
    let mut state = vec![S::zero(); n * d];
    let mut carry = vec![S::zero(); chunk * d];
    let mut gram = vec![S::zero(); chunk * chunk];
    let mut weighted_b = vec![S::zero(); chunk * n];

    let mut start = 0;
    while start < t {
        let end = (start + chunk).min(t);
        let len = end - start;
        let (a_blk, b_blk, c_blk, x_blk) = (
            &a[start..end],
            &b[start * n..end * n],
            &c[start * n..end * n],
            &x[start * d..end * d],
        );
        let y_blk = &mut y.data_mut()[start * d..end * d];

        // Intra-block: (F ⊙ C Bᵀ) x on the block.
        masked_gram(a_blk, b_blk, c_blk, len, n, &mut gram[..len * len]);
        S::gemm(len, len, d, &gram[..len * len], false, x_blk, false, y_blk, false);

        // Contribution of the incoming state: cum_t · C_tᵀ h_prev, cum_t = ∏_{k=start}^{t} A_k.
        if start > 0 {
            let carry = &mut carry[..len * d];
            S::gemm(len, n, d, c_blk, false, &state, false, carry, false);
            let mut cum = S::one();
            for (r, &ar) in a_blk.iter().enumerate() {
                cum = cum * ar;
                for (yv, &cv) in y_blk[r * d..(r + 1) * d].iter_mut().zip(&carry[r * d..(r + 1) * d]) {
                    *yv = *yv + cum * cv;
                }
            }
        }

        // Outgoing state: (∏ A) h_prev + Σ_i (∏_{k>i} A_k) B_i x_iᵀ.
        let mut tail = S::one();
        for r in (0..len).rev() {
            for (w, &bv) in weighted_b[r * n..(r + 1) * n]
                .iter_mut()
                .zip(&b_blk[r * n..(r + 1) * n])
            {
                *w = tail * bv;
            }
            tail = tail * a_blk[r];
        }
        for v in &mut state {
            *v = *v * tail;
        }
        S::gemm(n, len, d, &weighted_b[..len * n], true, x_blk, false, &mut state, true);
        if !state.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "ssd_chunked" });
        }
        start = end;
    }
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "ssd_chunked" });
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct SsdGrads<S: Scalar> {
    /// Same layout as the input decay (length T, or T×N for diagonal decay).
    pub da: Decay<S>,
    pub db: Tensor<S>,
    pub dc: Tensor<S>,
    pub dx: Tensor<S>,
}

/// Longest sequence for which [`ssd_backward`] uses the matrix form.
pub const DUAL_BACKWARD_MAX_STEPS: usize = 256;
/// Smallest decay the matrix-form backward divides by.
const DUAL_BACKWARD_MIN_DECAY: f64 = 1e-6;

/// Reverse-mode gradients of `⟨dy, y⟩` with respect to every input. Short
/// sequences with scalar decay bounded away from zero use the matrix form,
/// everything else the reverse recurrence.
pub fn ssd_backward<S: Scalar>(inputs: &SsdInputs<S>, dy: &Tensor<S>) -> Result<SsdGrads<S>> {
    if let Decay::Scalar(a) = &inputs.a {
        let min = S::lit(DUAL_BACKWARD_MIN_DECAY);
        if a.len() <= DUAL_BACKWARD_MAX_STEPS && a.iter().skip(1).all(|&v| v >= min) {
            return ssd_backward_dual(inputs, dy);
        }
    }
    ssd_backward_recurrent(inputs, dy)
}

/// Matrix-form gradients for scalar decay, with `M = F ⊙ G`, `G = C Bᵀ`:
/// `dx = Mᵀ dy`, `dG = (dy xᵀ) ⊙ F`, `dC = dG B`, `dB = dGᵀ C`, and
/// `A_k dA_k = Σ_{i ≥ k > j} (dy xᵀ ⊙ M)_ij`.
pub fn ssd_backward_dual<S: Scalar>(inputs: &SsdInputs<S>, dy: &Tensor<S>) -> Result<SsdGrads<S>> {
    let a = inputs.a.scalar("ssd_backward_dual")?;
    let SsdDims { t, n, d } = inputs.dims()?;
    if dy.shape() != [t, d] {
        return Err(Error::shape(
            "ssd_backward",
            format!("dy {:?}, expected [{t}, {d}]", dy.shape()),
        ));
    }
    let (b, c, x) = (inputs.b.data(), inputs.c.data(), inputs.x.data());
    let f = build_f(a)?.matrix.into_data();
    let mut gram = vec![S::zero(); t * t];
    S::gemm(t, n, t, c, false, b, true, &mut gram, false);
    let mut dm = vec![S::zero(); t * t];
    S::gemm(t, d, t, dy.data(), false, x, true, &mut dm, false);

    let mut m = gram;
    let mut dg = vec![S::zero(); t * t];
    let mut da = vec![S::zero(); t];
    for i in 0..t {
        // Running Σ_{j<k} of row i, added into every k ≤ i.
        let mut prefix = S::zero();
        for j in 0..=i {
            let o = i * t + j;
            m[o] = m[o] * f[o];
            dg[o] = dm[o] * f[o];
            if j < i {
                prefix = prefix + dm[o] * m[o];
                da[j + 1] = da[j + 1] + prefix;
            }
        }
        for o in i * t + i + 1..(i + 1) * t {
            m[o] = S::zero();
        }
    }
    for k in 1..t {
        da[k] = da[k] / a[k];
    }

    let mut dx = Tensor::zeros(&[t, d]);
    S::gemm(t, t, d, &m, true, dy.data(), false, dx.data_mut(), false);
    let mut dc = Tensor::zeros(&[t, n]);
    S::gemm(t, t, n, &dg, false, b, false, dc.data_mut(), false);
    let mut db = Tensor::zeros(&[t, n]);
    S::gemm(t, t, n, &dg, true, c, false, db.data_mut(), false);
    if !(dx.is_finite() && dc.is_finite() && db.is_finite() && da.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite { op: "ssd_backward" });
    }
    Ok(SsdGrads {
        da: Decay::Scalar(da),
        db,
        dc,
        dx,
    })
}

/// Reverse-recurrence gradients; supports scalar and diagonal decay.
///
/// With `g_t = ∂L/∂h_t = C_t dy_tᵀ + A_{t+1} g_{t+1}`:
/// `dC_t = h_t dy_t`, `dB_t = g_t x_t`, `dx_t = g_tᵀ B_t`, `dA_t = ⟨g_t, h_{t-1}⟩`.
pub fn ssd_backward_recurrent<S: Scalar>(inputs: &SsdInputs<S>, dy: &Tensor<S>) -> Result<SsdGrads<S>> {
    let SsdDims { t: steps, n, d } = inputs.dims()?;
    if dy.shape() != [steps, d] {
        return Err(Error::shape(
            "ssd_backward",
            format!("dy {:?}, expected [{steps}, {d}]", dy.shape()),
        ));
    }
    let nd = n * d;
    let mut states = vec![S::zero(); steps * nd];
    scan(inputs, |t, h| {
        states[t * nd..(t + 1) * nd].copy_from_slice(h);
        Ok(())
    })?;

    let (b, c, x, dyd) = (inputs.b.data(), inputs.c.data(), inputs.x.data(), dy.data());
    let diagonal = matches!(inputs.a, Decay::Diagonal(_));
    let decay_at = |t: usize, i: usize| match &inputs.a {
        Decay::Scalar(a) => a[t],
        Decay::Diagonal(a) => a.data()[t * n + i],
    };

    let mut da = vec![S::zero(); if diagonal { steps * n } else { steps }];
    let mut db = Tensor::zeros(&[steps, n]);
    let mut dc = Tensor::zeros(&[steps, n]);
    let mut dx = Tensor::zeros(&[steps, d]);
    let mut g = vec![S::zero(); nd];

    for t in (0..steps).rev() {
        let h_t = &states[t * nd..(t + 1) * nd];
        let dy_t = &dyd[t * d..(t + 1) * d];
        let x_t = &x[t * d..(t + 1) * d];

        for i in 0..n {
            // Carry from t+1, then inject C_t dy_tᵀ.
            let keep = if t + 1 < steps { decay_at(t + 1, i) } else { S::zero() };
            let ci = c[t * n + i];
            let g_row = &mut g[i * d..(i + 1) * d];
            let h_row = &h_t[i * d..(i + 1) * d];
            let mut dc_acc = S::zero();
            for ((gv, &dyv), &hv) in g_row.iter_mut().zip(dy_t).zip(h_row) {
                *gv = keep * *gv + ci * dyv;
                dc_acc = dc_acc + hv * dyv;
            }
            dc.data_mut()[t * n + i] = dc_acc;

            let mut db_acc = S::zero();
            for (&gv, &xv) in g_row.iter().zip(x_t) {
                db_acc = db_acc + gv * xv;
            }
            db.data_mut()[t * n + i] = db_acc;

            let bi = b[t * n + i];
            for (dxv, &gv) in dx.data_mut()[t * d..(t + 1) * d].iter_mut().zip(g_row.iter()) {
                *dxv = *dxv + gv * bi;
            }

            if t > 0 {
                let h_prev = &states[(t - 1) * nd + i * d..(t - 1) * nd + (i + 1) * d];
                let contrib: S = g_row.iter().zip(h_prev).map(|(&gv, &hv)| gv * hv).sum();
                if diagonal {
                    da[t * n + i] = contrib;
                } else {
                    da[t] = da[t] + contrib;
                }
            }
        }
    }

    let da = if diagonal {
        Decay::Diagonal(Tensor::new(&[steps, n], da)?)
    } else {
        Decay::Scalar(da)
    };
    Ok(SsdGrads { da, db, dc, dx })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(t: usize, n: usize, d: usize, seed: u64) -> SsdInputs<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat =
            |r: usize, c: usize| Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = mat(t, n);
        let c = mat(t, n);
        let x = mat(t, d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
        let a = (0..t).map(|_| rng.gen_range(0.5..1.0)).collect();
        SsdInputs::new(Decay::Scalar(a), b, c, x).unwrap()
    }

    #[test]
    fn memoryless_when_decay_is_zero() {
        let mut inputs = random_inputs(6, 3, 2, 1);
        inputs.a = Decay::Scalar(vec![0.0; 6]);
        let y = ssd_recurrent(&inputs).unwrap();
        for t in 0..6 {
            let cb: f64 = inputs.b.row(t).iter().zip(inputs.c.row(t)).map(|(b, c)| b * c).sum();
            for k in 0..2 {
                assert!((y.at(t, k) - cb * inputs.x.at(t, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pure_integrator_gives_prefix_sums() {
        let x = vec![1.0, 2.0, -0.5, 4.0, 3.0];
        let inputs = SsdInputs::new(
            Decay::Scalar(vec![1.0; 5]),
            Tensor::ones(&[5, 1]),
            Tensor::ones(&[5, 1]),
            Tensor::new(&[5, 1], x).unwrap(),
        )
        .unwrap();
        let expected = [1.0, 3.0, 2.5, 6.5, 9.5];
        for path in [SsdPath::Recurrent, SsdPath::Dual, SsdPath::Chunked(2)] {
            let y = ssd_forward(&inputs, path).unwrap();
            assert_eq!(y.data(), &expected, "{path}");
        }
    }

    #[test]
    fn build_f_three_steps_by_hand() {
        let (a1, a2, a3) = (0.3, 0.5, 0.7);
        let f = build_f(&[a1, a2, a3]).unwrap().matrix;
        let expected = [1.0, 0.0, 0.0, a2, 1.0, 0.0, a3 * a2, a3, 1.0];
        assert_eq!(f.data(), &expected);
    }

    #[test]
    fn build_f_matches_recurrence_with_unit_inputs() {
        // With B = C = 1 and x = e_j, y_i equals F_ij.
        let a = [0.9f64, 0.4, 0.8, 0.6];
        let f = build_f(&a).unwrap().matrix;
        for j in 0..4 {
            let mut x = vec![0.0; 4];
            x[j] = 1.0;
            let inputs = SsdInputs::new(
                Decay::Scalar(a.to_vec()),
                Tensor::ones(&[4, 1]),
                Tensor::ones(&[4, 1]),
                Tensor::new(&[4, 1], x).unwrap(),
            )
            .unwrap();
            let y = ssd_recurrent(&inputs).unwrap();
            for i in 0..4 {
                assert!((y.data()[i] - f.at(i, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn build_f_limits() {
        let ones = build_f(&[1.0f64; 4]).unwrap().matrix;
        let zeros = build_f(&[0.0f64; 4]).unwrap().matrix;
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(ones.at(i, j), if j <= i { 1.0 } else { 0.0 });
                assert_eq!(zeros.at(i, j), if j == i { 1.0 } else { 0.0 });
            }
        }
        assert!(build_f::<f64>(&[]).is_err());
    }

    #[test]
    fn single_step_dual() {
        let inputs = random_inputs(1, 4, 3, 9);
        let y = ssd_dual(&inputs).unwrap();
        let cb: f64 = inputs.b.row(0).iter().zip(inputs.c.row(0)).map(|(b, c)| b * c).sum();
        for k in 0..3 {
            assert!((y.at(0, k) - cb * inputs.x.at(0, k)).abs() < 1e-14);
        }
    }

    #[test]
    fn dual_matches_recurrent_in_f64() {
        let inputs = random_inputs(32, 16, 8, 3);
        let r = ssd_recurrent(&inputs).unwrap();
        let q = ssd_dual(&inputs).unwrap();
        assert!(r.max_abs_diff(&q) <= 1e-10 * r.max_abs().max(1.0));
    }

    #[test]
    fn chunked_degenerate_sizes() {
        let inputs = random_inputs(20, 5, 3, 4);
        let r = ssd_recurrent(&inputs).unwrap();
        let q = ssd_dual(&inputs).unwrap();
        assert!(ssd_chunked(&inputs, 20).unwrap().max_abs_diff(&q) < 1e-12);
        assert!(ssd_chunked(&inputs, 1).unwrap().max_abs_diff(&r) < 1e-12);
        assert!(ssd_chunked(&inputs, 7).unwrap().max_abs_diff(&r) < 1e-12);
        assert!(ssd_chunked(&inputs, 0).is_err());
        assert!(ssd_chunked(&inputs, 21).is_err());
    }

    #[test]
    fn dual_rejects_diagonal_decay() {
        let mut inputs = random_inputs(4, 2, 2, 5);
        inputs.a = Decay::Diagonal(Tensor::full(&[4, 2], 0.5));
        assert!(ssd_recurrent(&inputs).is_ok());
        assert!(matches!(ssd_dual(&inputs), Err(Error::InvalidArgument(_))));
        assert!(ssd_chunked(&inputs, 2).is_err());
    }

    #[test]
    fn diagonal_with_uniform_rows_equals_scalar() {
        let inputs = random_inputs(10, 4, 3, 6);
        let Decay::Scalar(a) = &inputs.a else { unreachable!() };
        let mut diag = inputs.clone();
        diag.a = Decay::Diagonal(Tensor::new(&[10, 4], a.iter().flat_map(|&v| [v; 4]).collect()).unwrap());
        let y1 = ssd_recurrent(&inputs).unwrap();
        let y2 = ssd_recurrent(&diag).unwrap();
        assert!(y1.max_abs_diff(&y2) < 1e-14);
    }

    #[test]
    fn causality_probe() {
        let inputs = random_inputs(12, 3, 2, 7);
        let base = ssd_dual(&inputs).unwrap();
        let mut probe = inputs.clone();
        probe.x.data_mut()[8 * 2] += 1.0;
        let moved = ssd_dual(&probe).unwrap();
        for t in 0..8 {
            assert_eq!(base.row(t), moved.row(t));
        }
        assert_ne!(base.row(8), moved.row(8));
        let h = build_h(&inputs).unwrap().matrix;
        for i in 0..12 {
            for j in i + 1..12 {
                assert_eq!(h.at(i, j), 0.0);
            }
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_grads() {
        let inputs = random_inputs(5, 2, 3, 8);
        let g = ssd_backward(&inputs, &Tensor::zeros(&[5, 3])).unwrap();
        let Decay::Scalar(da) = g.da else { unreachable!() };
        assert!(da.iter().all(|&v| v == 0.0));
        assert_eq!(g.db.max_abs(), 0.0);
        assert_eq!(g.dc.max_abs(), 0.0);
        assert_eq!(g.dx.max_abs(), 0.0);
    }

    #[test]
    fn final_state_matches_chunk_carry() {
        let inputs = random_inputs(9, 3, 2, 10);
        let (y, state) = ssd_recurrent_with_state(&inputs).unwrap();
        // y_T = C_Tᵀ h_T
        for k in 0..2 {
            let v: f64 = (0..3).map(|i| inputs.c.at(8, i) * state.h.at(i, k)).sum();
            assert!((v - y.at(8, k)).abs() < 1e-14);
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let r = SsdInputs::new(
            Decay::Scalar(vec![0.5f64; 3]),
            Tensor::zeros(&[4, 2]),
            Tensor::zeros(&[4, 2]),
            Tensor::zeros(&[4, 1]),
        );
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn dual_backward_matches_recurrent_backward() {
        for (seed, t) in [(3u64, 1usize), (4, 2), (5, 17), (6, 40)] {
            let inputs = random_inputs(t, 4, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let dy = Tensor::new(&[t, 3], (0..t * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let r = ssd_backward_recurrent(&inputs, &dy).unwrap();
            let m = ssd_backward_dual(&inputs, &dy).unwrap();
            assert!(m.dx.max_abs_diff(&r.dx) < 1e-10);
            assert!(m.db.max_abs_diff(&r.db) < 1e-10);
            assert!(m.dc.max_abs_diff(&r.dc) < 1e-10);
            let (Decay::Scalar(da_m), Decay::Scalar(da_r)) = (&m.da, &r.da) else {
                panic!()
            };
            for (u, v) in da_m.iter().zip(da_r) {
                assert!((u - v).abs() < 1e-10, "{u} vs {v}");
            }
        }
    }
}
