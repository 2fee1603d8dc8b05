// SPDX-License-Identifier: Apache-2.0

//! Dense row-major tensors over `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is the training default, `f64` is used
/// wherever tight numerical verification is needed.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = a·b (+ c when accumulate)`, where `a` is m×k and `b` is k×n after the
    /// optional transposes. Storage of `a`, `b`, `c` is row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! gemm_strides {
    ($m:expr, $k:expr, $n:expr, $a_trans:expr, $b_trans:expr) => {{
        // a is stored m×k (or k×m when transposed), b is k×n (or n×k).
        let (rsa, csa) = if $a_trans { (1, $m as isize) } else { ($k as isize, 1) };
        let (rsb, csb) = if $b_trans { (1, $k as isize) } else { ($n as isize, 1) };
        (rsa, csa, rsb, csb)
    }};
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_trans: bool,
        b: &[f32],
        b_trans: bool,
        c: &mut [f32],
        accumulate: bool,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa, rsb, csb) = gemm_strides!(m, k, n, a_trans, b_trans);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: bounds asserted above; strides describe the asserted extents.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_trans: bool,
        b: &[f64],
        b_trans: bool,
        c: &mut [f64],
        accumulate: bool,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa, rsb, csb) = gemm_strides!(m, k, n, a_trans, b_trans);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: bounds asserted above; strides describe the asserted extents.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &S::NAME)
            .field("shape", &self.shape)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|row| row.iter().map(|&v| S::lit(v))).collect();
        Self::new(&[r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Interprets the tensor as a matrix: the last axis is the column count and
    /// every leading axis folds into rows. A 1-D tensor is a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.split_last() {
            None => (1, 1),
            Some((&c, lead)) => (lead.iter().product(), c),
        }
    }

    pub fn row(&self, r: usize) -> &[S] {
        let (_, c) = self.rows_cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        let (_, cols) = self.rows_cols();
        self.data[r * cols + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: S, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub fn scale_inplace(&mut self, alpha: S) {
        for v in &mut self.data {
            *v = *v * alpha;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.f64().abs()).fold(0.0, f64::max)
    }

    /// Plain matrix product, outside any autodiff graph.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.rows_cols();
        let (k2, n) = other.rows_cols();
        if self.shape.len() != 2 || other.shape.len() != 2 || k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", self.shape, other.shape)));
        }
        let mut out = Self::zeros(&[m, n]);
        S::gemm(m, k, n, &self.data, false, &other.data, false, &mut out.data, false);
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }
}
