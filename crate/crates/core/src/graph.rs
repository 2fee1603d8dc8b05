// SPDX-License-Identifier: Apache-2.0

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! then walks the tape in reverse. Every op checks its output for NaN/Inf and
//! returns [`Error::NonFinite`] instead of propagating it.

use crate::error::{Error, Result};
use crate::kinematics::{fk_frame, fk_frame_backward, FkFrame, Skeleton};
use crate::params::ParameterStore;
use crate::ssd::{self, Decay, SsdInputs, SsdPath};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Zero padding placement for [`Graph::conv1d_time`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output `t` sees inputs `t-k+1 ..= t`.
    Causal,
    /// Output `t` sees inputs centred on `t`; `k` must be odd.
    Same,
}

enum Op<S: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_trans: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    Silu(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        offset: usize,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    Reshape(Var),
    RowNorms(Var),
    Mean(Var),
    Sum(Var),
    Ssd {
        a: Var,
        b: Var,
        c: Var,
        x: Var,
        inputs: Box<SsdInputs<S>>,
    },
    Fk {
        rot: Var,
        root: Var,
        skel: Box<Skeleton>,
        frames: Vec<FkFrame<S>>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    /// Store index → bound variable.
    bound: Vec<Option<Var>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

fn softplus<S: Scalar>(v: S) -> S {
    // log(1 + e^v) without overflow.
    if v > S::lit(20.0) {
        v
    } else {
        v.exp().ln_1p()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.rows_cols()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf not tied to a parameter store.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter; repeated lookups return the same variable.
    pub fn param(&mut self, store: &ParameterStore<S>, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        if self.bound.len() < store.len() {
            self.bound.resize(store.len(), None);
        }
        if let Some(v) = self.bound[idx] {
            return Ok(v);
        }
        let v = self.leaf(store.by_index(idx).1.clone());
        self.bound[idx] = Some(v);
        Ok(v)
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (br, bc) = self.rc(b);
        let (kb, n) = if b_trans { (bc, br) } else { (br, bc) };
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?} x {:?}{}",
                    self.shape(a),
                    self.shape(b),
                    if b_trans { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        S::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_trans,
            out.data_mut(),
            false,
        );
        self.push("matmul", out, Op::MatMul { a, b, b_trans }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-N vector to every row of an M×N matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.rc(x);
        if self.value(bias).numel() != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
        self.push("add_row", out, Op::AddRow { x, bias }, &[x, bias])
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale { x, c }, &[x])
    }

    /// Multiplies by a single-element variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(
                "mul_scalar",
                format!("{:?} is not a scalar", self.shape(s)),
            ));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * sv);
        self.push("mul_scalar", out, Op::MulScalar { x, s }, &[x, s])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push("silu", out, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(S::zero()));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(softplus);
        self.push("softplus", out, Op::Softplus(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        self.push("exp", out, Op::Exp(x), &[x])
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, e) = self.rc(x);
        if e == 0 || self.value(gain).numel() != e || self.value(bias).numel() != e {
            return Err(Error::shape("layer_norm", format!("{:?}", self.shape(x))));
        }
        let eps = S::lit(eps);
        let n = S::from_usize(e).expect("usize fits");
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![S::zero(); m * e];
        let mut inv_std = vec![S::zero(); m];
        let mut out = Tensor::zeros(self.shape(x));
        for r in 0..m {
            let row = self.value(x).row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            let o = &mut out.data_mut()[r * e..(r + 1) * e];
            for c in 0..e {
                let h = (row[c] - mean) * is;
                xhat[r * e + c] = h;
                o[c] = g[c] * h + b[c];
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Temporal convolution of `x` (T×E) with `kernel` (k×E×E_out), zero padded.
    pub fn conv1d_time(&mut self, x: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let (t, e) = self.rc(x);
        let ks = self.shape(kernel).to_vec();
        if self.shape(x).len() != 2 || ks.len() != 3 || ks[1] != e || ks[0] == 0 {
            return Err(Error::shape(
                "conv1d_time",
                format!("x {:?}, kernel {ks:?}", self.shape(x)),
            ));
        }
        let (k, eo) = (ks[0], ks[2]);
        let offset = match padding {
            Padding::Causal => k - 1,
            Padding::Same if k % 2 == 1 => k / 2,
            Padding::Same => {
                return Err(Error::InvalidArgument(format!(
                    "same-padding convolution needs an odd kernel width, got {k}"
                )))
            }
        };
        if let Some(bv) = bias {
            if self.value(bv).numel() != eo {
                return Err(Error::shape("conv1d_time", "bias length"));
            }
        }
        let mut out = Tensor::zeros(&[t, eo]);
        let (xd, kd) = (self.value(x).data(), self.value(kernel).data());
        for j in 0..k {
            let Some((lo, hi)) = tap_rows(t, j, offset) else {
                continue;
            };
            let src = lo + j - offset;
            S::gemm(
                hi - lo,
                e,
                eo,
                &xd[src * e..(src + hi - lo) * e],
                false,
                &kd[j * e * eo..(j + 1) * e * eo],
                false,
                &mut out.data_mut()[lo * eo..hi * eo],
                true,
            );
        }
        if let Some(bv) = bias {
            let b = self.value(bv).data().to_vec();
            for row in out.data_mut().chunks_mut(eo) {
                for (v, &bb) in row.iter_mut().zip(&b) {
                    *v = *v + bb;
                }
            }
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            "conv1d_time",
            out,
            Op::Conv1d {
                x,
                kernel,
                bias,
                offset,
            },
            &inputs,
        )
    }

    /// Per-channel causal convolution of `x` (T×E) with `kernel` (k×E).
    pub fn depthwise_causal_conv(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (t, e) = self.rc(x);
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 2 || ks[1] != e || ks[0] == 0 {
            return Err(Error::shape(
                "depthwise_causal_conv",
                format!("x {:?}, kernel {ks:?}", self.shape(x)),
            ));
        }
        let k = ks[0];
        let mut out = Tensor::zeros(&[t, e]);
        let (xd, kd) = (self.value(x).data(), self.value(kernel).data());
        for tt in 0..t {
            let o = &mut out.data_mut()[tt * e..(tt + 1) * e];
            for j in 0..k {
                // tap j reads x[tt + j - (k-1)]
                let Some(src) = (tt + j).checked_sub(k - 1) else {
                    continue;
                };
                for ((ov, &xv), &wv) in o
                    .iter_mut()
                    .zip(&xd[src * e..(src + 1) * e])
                    .zip(&kd[j * e..(j + 1) * e])
                {
                    *ov = *ov + xv * wv;
                }
            }
            if let Some(bv) = bias {
                for (ov, &bb) in o.iter_mut().zip(self.nodes[bv.0].value.data()) {
                    *ov = *ov + bb;
                }
            }
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            "depthwise_causal_conv",
            out,
            Op::DepthwiseConv { x, kernel, bias },
            &inputs,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rc(x);
        if self.shape(x).len() != 2 || start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}+{len} of {:?}", self.shape(x)),
            ));
        }
        let xd = self.value(x).data();
        let data = (0..m)
            .flat_map(|r| xd[r * n + start..r * n + start + len].iter().copied())
            .collect();
        let out = Tensor::new(&[m, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rc(x);
        if self.shape(x).len() != 2 || start + len > m {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}+{len} of {:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(&[len, n], data)?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|&p| self.rc(p).0).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|&p| self.rc(p).0 != m || self.shape(p).len() != 2) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let n: usize = parts.iter().map(|&p| self.rc(p).1).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.rc(x);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Euclidean norm of each row; output has one entry per row.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rc(x);
        let xd = self.value(x).data();
        let data = (0..m)
            .map(|r| xd[r * n..(r + 1) * n].iter().map(|&v| v * v).sum::<S>().sqrt())
            .collect();
        let out = Tensor::new(&[m], data)?;
        self.push("row_norms", out, Op::RowNorms(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / S::from_usize(t.numel()).expect("usize fits"));
        self.push("mean", out, Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    /// Selective SSM with scalar decay `a` (length T), `b`, `c` (T×N), `x` (T×D).
    pub fn ssd(&mut self, a: Var, b: Var, c: Var, x: Var, path: SsdPath) -> Result<Var> {
        let inputs = SsdInputs::new(
            Decay::Scalar(self.value(a).data().to_vec()),
            self.value(b).clone(),
            self.value(c).clone(),
            self.value(x).clone(),
        )?;
        let out = ssd::ssd_forward(&inputs, path)?;
        self.push(
            "ssd",
            out,
            Op::Ssd {
                a,
                b,
                c,
                x,
                inputs: Box::new(inputs),
            },
            &[a, b, c, x],
        )
    }

    /// Forward kinematics: `rot` (T×6J) local 6D rotations and `root` (T×3)
    /// translations to global positions (T×3J).
    pub fn forward_kinematics(&mut self, rot: Var, root: Var, skel: &Skeleton) -> Result<Var> {
        let (t, w) = self.rc(rot);
        let nj = skel.num_joints();
        if w != nj * 6 || self.rc(root) != (t, 3) {
            return Err(Error::shape(
                "forward_kinematics",
                format!("rot {:?}, root {:?}, {nj} joints", self.shape(rot), self.shape(root)),
            ));
        }
        let mut frames = Vec::with_capacity(t);
        let mut data = Vec::with_capacity(t * nj * 3);
        for f in 0..t {
            let r = self.value(root).row(f);
            let frame = fk_frame(skel, self.value(rot).row(f), &[r[0], r[1], r[2]]);
            data.extend(frame.positions.iter().flatten());
            frames.push(frame);
        }
        let out = Tensor::new(&[t, nj * 3], data)?;
        let op = Op::Fk {
            rot,
            root,
            skel: Box::new(skel.clone()),
            frames,
        };
        self.push("forward_kinematics", out, op, &[rot, root])
    }

    /// Gradients of the single-element `loss` with respect to every variable.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Parameter gradients in store order (zeros for unused parameters).
    pub fn param_grads(&self, grads: &Gradients<S>, store: &ParameterStore<S>) -> Vec<Tensor<S>> {
        (0..store.len())
            .map(|i| {
                self.bound
                    .get(i)
                    .copied()
                    .flatten()
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.by_index(i).1.shape()))
            })
            .collect()
    }

    fn backprop(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = Accumulator { graph: self, grads };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_trans } => {
                let (m, k) = val(*a).rows_cols();
                let n = g.rows_cols().1;
                if let Some(da) = acc.buf(*a) {
                    // dA = G·B (or G·Bᵀ when B was not transposed)
                    S::gemm(m, n, k, gd, false, val(*b).data(), !*b_trans, da, true);
                }
                if let Some(db) = acc.buf(*b) {
                    if *b_trans {
                        S::gemm(n, m, k, gd, true, val(*a).data(), false, db, true);
                    } else {
                        S::gemm(k, m, n, val(*a).data(), true, gd, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                acc.add_scaled(*a, gd, S::one());
                acc.add_scaled(*b, gd, S::one());
            }
            Op::Sub(a, b) => {
                acc.add_scaled(*a, gd, S::one());
                acc.add_scaled(*b, gd, -S::one());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc.add_with(*a, |i| gd[i] * bd[i]);
                acc.add_with(*b, |i| gd[i] * ad[i]);
            }
            Op::AddRow { x, bias } => {
                acc.add_scaled(*x, gd, S::one());
                let n = g.rows_cols().1;
                if let Some(db) = acc.buf(*bias) {
                    for row in gd.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Scale { x, c } => acc.add_scaled(*x, gd, *c),
            Op::MulScalar { x, s } => {
                let sv = val(*s).data()[0];
                acc.add_scaled(*x, gd, sv);
                if let Some(ds) = acc.buf(*s) {
                    let dot: S = gd.iter().zip(val(*x).data()).map(|(&a, &b)| a * b).sum();
                    ds[0] = ds[0] + dot;
                }
            }
            Op::Silu(x) => {
                let xd = val(*x).data();
                acc.add_with(*x, |i| {
                    let s = sigmoid(xd[i]);
                    gd[i] * s * (S::one() + xd[i] * (S::one() - s))
                });
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                acc.add_with(*x, |i| if xd[i] > S::zero() { gd[i] } else { S::zero() });
            }
            Op::Softplus(x) => {
                let xd = val(*x).data();
                acc.add_with(*x, |i| gd[i] * sigmoid(xd[i]));
            }
            Op::Exp(x) => {
                let od = node.value.data();
                acc.add_with(*x, |i| gd[i] * od[i]);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, e) = val(*x).rows_cols();
                let gain_d = val(*gain).data();
                let n = S::from_usize(e).expect("usize fits");
                if let Some(dx) = acc.buf(*x) {
                    for r in 0..m {
                        let (gr, hr) = (&gd[r * e..(r + 1) * e], &xhat[r * e..(r + 1) * e]);
                        let mut mean_dh = S::zero();
                        let mut mean_dh_h = S::zero();
                        for c in 0..e {
                            let dh = gr[c] * gain_d[c];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[c];
                        }
                        mean_dh = mean_dh / n;
                        mean_dh_h = mean_dh_h / n;
                        for c in 0..e {
                            let dh = gr[c] * gain_d[c];
                            let v = &mut dx[r * e + c];
                            *v = *v + inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
                if let Some(dg) = acc.buf(*gain) {
                    for (i, (&gv, &h)) in gd.iter().zip(xhat).enumerate() {
                        dg[i % e] = dg[i % e] + gv * h;
                    }
                }
                if let Some(db) = acc.buf(*bias) {
                    for (i, &gv) in gd.iter().enumerate() {
                        db[i % e] = db[i % e] + gv;
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                offset,
            } => {
                let (t, e) = val(*x).rows_cols();
                let ks = val(*kernel).shape();
                let (k, eo) = (ks[0], ks[2]);
                let (xd, kd) = (val(*x).data(), val(*kernel).data());
                if let Some(dx) = acc.buf(*x) {
                    for j in 0..k {
                        let Some((lo, hi)) = tap_rows(t, j, *offset) else {
                            continue;
                        };
                        let src = lo + j - offset;
                        S::gemm(
                            hi - lo,
                            eo,
                            e,
                            &gd[lo * eo..hi * eo],
                            false,
                            &kd[j * e * eo..(j + 1) * e * eo],
                            true,
                            &mut dx[src * e..(src + hi - lo) * e],
                            true,
                        );
                    }
                }
                if let Some(dk) = acc.buf(*kernel) {
                    for j in 0..k {
                        let Some((lo, hi)) = tap_rows(t, j, *offset) else {
                            continue;
                        };
                        let src = lo + j - offset;
                        S::gemm(
                            e,
                            hi - lo,
                            eo,
                            &xd[src * e..(src + hi - lo) * e],
                            true,
                            &gd[lo * eo..hi * eo],
                            false,
                            &mut dk[j * e * eo..(j + 1) * e * eo],
                            true,
                        );
                    }
                }
                if let Some(b) = bias {
                    if let Some(db) = acc.buf(*b) {
                        for row in gd.chunks(eo) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
            Op::DepthwiseConv { x, kernel, bias } => {
                let (t, e) = val(*x).rows_cols();
                let k = val(*kernel).shape()[0];
                let (xd, kd) = (val(*x).data(), val(*kernel).data());
                if let Some(dx) = acc.buf(*x) {
                    for tt in 0..t {
                        for j in 0..k {
                            let Some(src) = (tt + j).checked_sub(k - 1) else {
                                continue;
                            };
                            for c in 0..e {
                                dx[src * e + c] = dx[src * e + c] + gd[tt * e + c] * kd[j * e + c];
                            }
                        }
                    }
                }
                if let Some(dk) = acc.buf(*kernel) {
                    for tt in 0..t {
                        for j in 0..k {
                            let Some(src) = (tt + j).checked_sub(k - 1) else {
                                continue;
                            };
                            for c in 0..e {
                                dk[j * e + c] = dk[j * e + c] + gd[tt * e + c] * xd[src * e + c];
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    if let Some(db) = acc.buf(*b) {
                        for row in gd.chunks(e) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = val(*x).rows_cols();
                let len = g.rows_cols().1;
                if let Some(dx) = acc.buf(*x) {
                    for r in 0..m {
                        for c in 0..len {
                            dx[r * n + start + c] = dx[r * n + start + c] + gd[r * len + c];
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = g.rows_cols().1;
                if let Some(dx) = acc.buf(*x) {
                    for (d, &v) in dx[start * n..start * n + gd.len()].iter_mut().zip(gd) {
                        *d = *d + v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = g.rows_cols();
                let mut col = 0;
                for &p in parts {
                    let w = val(p).rows_cols().1;
                    if let Some(dp) = acc.buf(p) {
                        for r in 0..m {
                            for c in 0..w {
                                dp[r * w + c] = dp[r * w + c] + gd[r * n + col + c];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SoftmaxRows(x) => {
                let n = g.rows_cols().1.max(1);
                let p = node.value.data();
                if let Some(dx) = acc.buf(*x) {
                    for ((dr, gr), pr) in dx.chunks_mut(n).zip(gd.chunks(n)).zip(p.chunks(n)) {
                        let dot: S = gr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                        for c in 0..n {
                            dr[c] = dr[c] + pr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Reshape(x) => acc.add_scaled(*x, gd, S::one()),
            Op::RowNorms(x) => {
                let (_, n) = val(*x).rows_cols();
                let (xd, norms) = (val(*x).data(), node.value.data());
                acc.add_with(*x, |i| {
                    let r = i / n;
                    if norms[r] > S::zero() {
                        gd[r] * xd[i] / norms[r]
                    } else {
                        S::zero()
                    }
                });
            }
            Op::Mean(x) => {
                let scale = gd[0] / S::from_usize(val(*x).numel()).expect("usize fits");
                acc.add_with(*x, |_| scale);
            }
            Op::Sum(x) => {
                let v = gd[0];
                acc.add_with(*x, |_| v);
            }
            Op::Ssd { a, b, c, x, inputs } => {
                let sg = ssd::ssd_backward(inputs, g)?;
                let Decay::Scalar(da) = &sg.da else {
                    unreachable!("graph ssd uses scalar decay")
                };
                acc.add_scaled(*a, da, S::one());
                acc.add_scaled(*b, sg.db.data(), S::one());
                acc.add_scaled(*c, sg.dc.data(), S::one());
                acc.add_scaled(*x, sg.dx.data(), S::one());
            }
            Op::Fk {
                rot,
                root,
                skel,
                frames,
            } => {
                let nj = skel.num_joints();
                let w = nj * 3;
                let rot_needs = self.nodes[rot.0].needs_grad;
                let root_needs = self.nodes[root.0].needs_grad;
                let mut d_rot = vec![S::zero(); frames.len() * nj * 6];
                let mut d_root = vec![S::zero(); frames.len() * 3];
                for (f, frame) in frames.iter().enumerate() {
                    let (dr, dt) = fk_frame_backward(skel, val(*rot).row(f), frame, &gd[f * w..(f + 1) * w]);
                    d_rot[f * nj * 6..(f + 1) * nj * 6].copy_from_slice(&dr);
                    d_root[f * 3..f * 3 + 3].copy_from_slice(&dt);
                }
                if rot_needs {
                    acc.add_scaled(*rot, &d_rot, S::one());
                }
                if root_needs {
                    acc.add_scaled(*root, &d_root, S::one());
                }
            }
        }
        Ok(())
    }
}

/// Output rows `lo..hi` that tap `j` of a width-k kernel touches, given the
/// input row `t + j - offset`.
fn tap_rows(t: usize, j: usize, offset: usize) -> Option<(usize, usize)> {
    let lo = offset.saturating_sub(j);
    let hi = (t + offset).saturating_sub(j).min(t);
    (lo < hi).then_some((lo, hi))
}

struct Accumulator<'a, S: Scalar> {
    graph: &'a Graph<S>,
    grads: &'a mut [Option<Tensor<S>>],
}

impl<S: Scalar> Accumulator<'_, S> {
    /// Gradient buffer for `v`, allocated on first use; `None` if `v` needs no gradient.
    fn buf(&mut self, v: Var) -> Option<&mut [S]> {
        let node = &self.graph.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let slot = &mut self.grads[v.0];
        Some(slot.get_or_insert_with(|| Tensor::zeros(node.value.shape())).data_mut())
    }

    fn add_scaled(&mut self, v: Var, src: &[S], alpha: S) {
        if let Some(buf) = self.buf(v) {
            for (d, &s) in buf.iter_mut().zip(src) {
                *d = *d + alpha * s;
            }
        }
    }

    fn add_with(&mut self, v: Var, f: impl Fn(usize) -> S) {
        if let Some(buf) = self.buf(v) {
            for (i, d) in buf.iter_mut().enumerate() {
                *d = *d + f(i);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
