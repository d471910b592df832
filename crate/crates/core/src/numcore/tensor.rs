//! Dense row-major tensors over `f32`/`f64`.

use std::fmt;
use std::iter::Sum;

use crate::{Error, Result};

/// Scalar types the engine is instantiated at. `f32` is the training
/// precision; `f64` gives finite-difference checks enough headroom.
pub trait Real:
    num_traits::Float + num_traits::NumCast + fmt::Debug + fmt::Display + Default + Send + Sync + Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// An n-dimensional real array with an optional gradient buffer.
///
/// Invariants: `shape.iter().product() == data.len()`, and `grad`, when
/// present, has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Accumulates `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[F]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![F::zero(); self.data.len()]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Casts element-wise to another precision. Used by the `f64` gradient
    /// checks to probe models built at `f32`.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f64>::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 3.0, 4.0][..]));
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0, 0.0, 0.0][..]));
    }
}
