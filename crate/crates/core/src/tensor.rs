//! Dense row-major n-dimensional arrays.
//!
//! Activations use the batch-first, channels-last layout `[batch, height, width, channels]`.
//! Two storage precisions exist: `f32` for training and `f64` for gradient checking.
//! Reductions always accumulate in `f64` in a fixed serial order.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};
use std::sync::atomic::{AtomicBool, Ordering};

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

static DETERMINISTIC: AtomicBool = AtomicBool::new(true);

/// Turns the global deterministic flag on or off.
///
/// With the flag off, matrix products split their output rows across the rayon pool.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn is_deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

/// Storage precision tag. The discriminant is the on-disk checkpoint code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar element type of a [`Tensor`].
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    const DTYPE: DType;
    /// Saturation bound applied to sigmoid inputs before exponentiation.
    const EXP_CLAMP: Self;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    const EXP_CLAMP: f32 = 30.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    const EXP_CLAMP: f64 = 60.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Dense n-dimensional array. `data.len()` always equals the product of `shape`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}(", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, ")")
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("shape must have at least one axis"));
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!(
            "extent of axis {axis} in {shape:?} must be at least 1"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor from a shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    /// Same shape, all zeros. Infallible because `self` already has a valid shape.
    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        let n = check_shape(new_shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} values) into {new_shape:?} ({n} values)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Standard matrix product of rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Elementwise `a op b`. `b` either matches `a` exactly or is a vector over
    /// `a`'s trailing (channel) axis.
    pub fn elementwise(&self, op: BinaryOp, b: &Tensor<T>) -> Result<Self> {
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        if self.shape == b.shape {
            let data = self
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let channels = *self.shape.last().expect("non-empty shape");
        if b.rank() == 1 && b.shape[0] == channels {
            let data = self
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data[i % channels]))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        Err(Error::shape(format!(
            "cannot combine {:?} with {:?}: shapes must match or the second must be [{channels}]",
            self.shape, b.shape
        )))
    }

    pub fn add(&self, b: &Tensor<T>) -> Result<Self> {
        self.elementwise(BinaryOp::Add, b)
    }

    pub fn sub(&self, b: &Tensor<T>) -> Result<Self> {
        self.elementwise(BinaryOp::Sub, b)
    }

    pub fn mul(&self, b: &Tensor<T>) -> Result<Self> {
        self.elementwise(BinaryOp::Mul, b)
    }

    /// Reduces over `axes`, removing them. Reducing every axis yields shape `[1]`;
    /// an empty axis set returns the input unchanged.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::shape(format!(
                    "axis {a} out of range for rank {rank}"
                )));
            }
            reduced[a] = true;
        }
        if axes.is_empty() {
            return Ok(self.clone());
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .collect();
        let out_len: usize = out_shape.iter().product();
        let count = self.data.len() / out_len;
        let init = match op {
            ReduceOp::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        let mut acc = vec![init; out_len];
        let strides = strides(&self.shape);
        let out_strides = strides_of_kept(&self.shape, &reduced);
        for (flat, v) in self.data.iter().enumerate() {
            let mut rem = flat;
            let mut out_idx = 0;
            for axis in 0..rank {
                let coord = rem / strides[axis];
                rem %= strides[axis];
                out_idx += coord * out_strides[axis];
            }
            let v = v.as_f64();
            match op {
                ReduceOp::Max => {
                    if v > acc[out_idx] {
                        acc[out_idx] = v;
                    }
                }
                _ => acc[out_idx] += v,
            }
        }
        if op == ReduceOp::Mean {
            for a in &mut acc {
                *a /= count as f64;
            }
        }
        let shape = if out_shape.is_empty() {
            vec![1]
        } else {
            out_shape
        };
        Ok(Tensor {
            shape,
            data: acc.into_iter().map(T::from_f64).collect(),
        })
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn strides_of_kept(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if !reduced[i] {
            s[i] = acc;
            acc *= shape[i];
        }
    }
    s
}

// Matrix kernels on row-major slices. Each accumulates into `c`.

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    };
    if is_deterministic() || m < 64 {
        c.chunks_mut(n).enumerate().for_each(row);
    } else {
        c.par_chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(p, c_row): (usize, &mut [T])| {
        for i in 0..m {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[i * n..(i + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    };
    if is_deterministic() || k < 64 {
        c.chunks_mut(n).enumerate().for_each(row);
    } else {
        c.par_chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * n..(i + 1) * n];
        for (p, cp) in c_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            *cp += s;
        }
    };
    if is_deterministic() || m < 64 {
        c.chunks_mut(k).enumerate().for_each(row);
    } else {
        c.par_chunks_mut(k).enumerate().for_each(row);
    }
}
