//! Dense N-dimensional tensors over `f32` or `f64`.
//!
//! This is deliberately minimal: a shape, a flat row-major value buffer and
//! an optional gradient buffer of the same shape. It carries images,
//! activations and parameters through the layer stack; it is not a general
//! linear-algebra type.

use crate::error::{Error, Result};

/// Scalar types the engine runs on. Training uses `f32`; the
/// finite-difference harness instantiates everything at `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("f64 conversion")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense tensor: row-major values plus an optional same-shape gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor from a shape and matching flat data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Reinterprets the same buffer under a new shape with equal volume.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} values) into {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Gradient buffer, if one has been attached.
    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocating a zeroed one on first use.
    pub fn grad_mut(&mut self) -> &mut [F] {
        if self.grad.is_none() {
            self.grad = Some(vec![F::zero(); self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.fill(F::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Errors if any stored value is NaN or infinite.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{what} contains a non-finite value at flat index {pos}"
            )));
        }
        Ok(())
    }

    /// Converts element-by-element into another scalar type.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of_f64(v.as_f64())).collect(),
            grad: None,
        }
    }
}

/// Splits a 3-D `[C,H,W]` or 4-D `[N,C,H,W]` shape into `(batch, chw)`.
/// 3-D input is treated as a single-sample batch.
pub fn as_batched_3d(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match *shape {
        [c, h, w] => Ok((1, [c, h, w])),
        [n, c, h, w] => Ok((n, [c, h, w])),
        _ => Err(Error::Shape(format!(
            "expected [C,H,W] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

/// Splits a 1-D `[D]` or 2-D `[N,D]` shape into `(batch, d)`.
pub fn as_batched_1d(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [d] => Ok((1, d)),
        [n, d] => Ok((n, d)),
        _ => Err(Error::Shape(format!("expected [D] or [N,D], got {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_must_match_data() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_matches_shape() {
        let mut t = Tensor::<f64>::zeros(&[2, 2]);
        assert!(t.grad().is_none());
        t.grad_mut()[3] = 1.5;
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 0.0, 1.5]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 4]);
    }

    #[test]
    fn finite_validation_detects_nan_and_inf() {
        let mut t = Tensor::<f32>::zeros(&[3]);
        t.validate_finite("t").unwrap();
        t.data_mut()[1] = f32::NAN;
        assert!(t.validate_finite("t").is_err());
        t.data_mut()[1] = f32::INFINITY;
        assert!(t.validate_finite("t").is_err());
    }

    #[test]
    fn reshape_preserves_volume() {
        let t = Tensor::<f32>::from_vec(vec![2, 6], (0..12).map(|i| i as f32).collect()).unwrap();
        let r = t.clone().reshaped(vec![3, 4]).unwrap();
        assert_eq!(r.shape(), &[3, 4]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![5, 2]).is_err());
    }
}
