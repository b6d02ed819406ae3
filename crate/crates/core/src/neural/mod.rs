//! Minimal tensor and reverse-mode autodiff core.
//!
//! Every kernel accumulates in a fixed order that does not depend on batch
//! size, so a single row evaluated alone is bit-identical to the same row
//! inside a batch.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{param_err, Result};

pub use layers::{
    bilinear_sample, positional_encoding, positional_encoding_jacobian, ConvEncoder, ConvEncoderSpec, Mlp,
    MlpSpec,
};
pub use optim::Adam;
pub use params::{pad_input_channels, ParamStore};
pub use tape::{Gradients, Tape, Var};

/// Floating-point element type of tensors and tapes.
pub trait Scalar:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + Sum + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return param_err(format!("shape {shape:?} does not match {} elements", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        self.len() / self.cols().max(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return param_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Tensor<f32> {
    pub fn to_container(&self) -> crate::container::Tensor {
        crate::container::Tensor::f32(self.shape.clone(), self.data.clone())
    }

    pub fn from_container(t: &crate::container::Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.to_f32_vec(),
        }
    }
}

/// `c[m, n] (+)= a[m, k] * b[k, n]`, accumulated over k in order for each
/// row independently.
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[k, n] += a[m, k]^T * g[m, n]`.
pub(crate) fn matmul_at_acc<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += aik * gv;
            }
        }
    }
}

/// `c[m, k] += g[m, n] * b[k, n]^T`.
pub(crate) fn matmul_bt_acc<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            c[i * k + kk] += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_kernels_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        let mut at = vec![0.0; k * n];
        matmul_at_acc(&a, &c, &mut at, m, k, n);
        let mut bt = vec![0.0; m * k];
        matmul_bt_acc(&c, &b, &mut bt, m, k, n);
        for kk in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + kk] * c[i * n + j]).sum();
                assert!((at[kk * n + j] - want).abs() < 1e-12);
            }
        }
        for i in 0..m {
            for kk in 0..k {
                let want: f64 = (0..n).map(|j| c[i * n + j] * b[kk * n + j]).sum();
                assert!((bt[i * k + kk] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_row_equals_single_row() {
        let (m, k, n) = (7, 13, 9);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.7).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.3).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        let mut one = vec![0.0; n];
        matmul_acc(&a[4 * k..5 * k], &b, &mut one, 1, k, n);
        assert_eq!(&c[4 * n..5 * n], &one[..]);
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert_eq!((t.rows(), t.cols()), (2, 3));
        assert!(t.clone().reshape(&[3, 2]).is_ok());
        assert!(t.reshape(&[4]).is_err());
    }
}
