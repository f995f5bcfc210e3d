//! Minimal n-dimensional array with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain contiguous value (row-major). All differentiable
//! computation goes through a [`Graph`](graph::Graph), which records ops and
//! replays them in reverse for gradients. Values are generic over the element
//! type: `f32` for training, `f64` for gradient checks.

pub mod finite_diff;
pub mod graph;
#[cfg(test)]
mod graph_tests;

pub use graph::{Graph, NodeId};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Element type of tensors: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Contiguous row-major n-dimensional array.
///
/// Invariant: `product(shape) == data.len()`. A rank-0 shape is not used;
/// scalars are represented as shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidParameter(format!(
                "tensor data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); numel],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Standard-normal samples, drawn element by element in index order.
    pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| E::from_f64(rng.sample(StandardNormal)))
            .collect();
        Tensor { shape, data }
    }

    /// Uniform samples in `[lo, hi)`, drawn element by element in index order.
    pub fn rand_uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| E::from_f64(rng.random_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Value of a [1]-shaped tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.data[0]
    }

    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise `self + other` (plain value op, no gradient tracking).
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("tensor add", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise `self - other` (plain value op).
    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("tensor sub", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// `self * c` (plain value op).
    pub fn scale(&self, c: E) -> Self {
        self.map(|x| x * c)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|x| x.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation over all elements.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self
            .data
            .iter()
            .map(|x| {
                let d = x.as_f64() - m;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64;
        var.sqrt()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| F::from_f64(x.as_f64())).collect(),
        }
    }

    /// Horizontal flip of an `[H, W, C]` image/latent (width axis reversed).
    pub fn hflip(&self) -> Result<Self> {
        if self.shape.len() != 3 {
            return Err(Error::InvalidParameter(format!(
                "hflip expects [H, W, C], got {:?}",
                self.shape
            )));
        }
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut data = vec![E::zero(); self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * c;
                let dst = (y * w + (w - 1 - x)) * c;
                data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)));
    }

    #[test]
    fn numel_matches_shape_product() {
        let t = Tensor::<f64>::zeros(vec![3, 4, 5]);
        assert_eq!(t.numel(), 60);
        assert_eq!(t.shape(), &[3, 4, 5]);
    }

    #[test]
    fn hflip_reverses_width() {
        // 1x3x2 image: columns [a, b, c] -> [c, b, a]
        let t = Tensor::<f32>::from_vec(vec![1, 3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let f = t.hflip().unwrap();
        assert_eq!(f.data(), &[5., 6., 3., 4., 1., 2.]);
        assert_eq!(f.hflip().unwrap().data(), t.data());
    }

    proptest! {
        #[test]
        fn reshape_roundtrip_is_identity(
            data in proptest::collection::vec(-100.0f64..100.0, 1..64),
        ) {
            let n = data.len();
            let t = Tensor::from_vec(vec![n], data).unwrap();
            let r = t.reshaped(vec![1, n]).unwrap().reshaped(vec![n]).unwrap();
            prop_assert_eq!(r.data(), t.data());
            prop_assert_eq!(r.shape(), t.shape());
        }
    }
}
