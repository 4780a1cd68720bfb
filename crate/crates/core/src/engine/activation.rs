//! Rectifier activation and the flatten reshape.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Elementwise `max(0, x)`. The subgradient at exactly zero is taken as 0.
#[derive(Debug, Clone, Default)]
pub struct Relu<F: Scalar> {
    pub(crate) cache: Option<Tensor<F>>,
}

impl<F: Scalar> Relu<F> {
    pub fn new() -> Self {
        Relu { cache: None }
    }

    fn apply(input: &Tensor<F>) -> Tensor<F> {
        let mut out = input.clone();
        for v in out.data_mut() {
            if *v < F::zero() {
                *v = F::zero();
            }
        }
        out
    }

    pub fn forward_train(&mut self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let out = Self::apply(input);
        self.cache = Some(input.clone());
        Ok(out)
    }

    pub fn forward_eval(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(Self::apply(input))
    }

    pub fn backward(&mut self, output_grad: &Tensor<F>) -> Result<Tensor<F>> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| Error::Numerical("activation backward without forward cache".into()))?;
        if input.len() != output_grad.len() {
            return Err(Error::Shape(
                "activation backward: grad does not match cached input".into(),
            ));
        }
        let mut gin = Tensor::zeros(input.shape());
        for ((g, &x), &og) in gin
            .data_mut()
            .iter_mut()
            .zip(input.data())
            .zip(output_grad.data())
        {
            if x > F::zero() {
                *g = og;
            }
        }
        Ok(gin)
    }
}

/// `[N, C, H, W] -> [N, C*H*W]`.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    pub(crate) cache: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten { cache: None }
    }

    fn out_shape(shape: &[usize]) -> Result<Vec<usize>> {
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "flatten expects a batched input, got {shape:?}"
            )));
        }
        Ok(vec![shape[0], shape[1..].iter().product()])
    }

    pub fn forward_train<F: Scalar>(&mut self, input: &Tensor<F>) -> Result<Tensor<F>> {
        self.cache = Some(input.shape().to_vec());
        input.clone().reshaped(Self::out_shape(input.shape())?)
    }

    pub fn forward_eval<F: Scalar>(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        input.clone().reshaped(Self::out_shape(input.shape())?)
    }

    pub fn backward<F: Scalar>(&mut self, output_grad: &Tensor<F>) -> Result<Tensor<F>> {
        let shape = self
            .cache
            .take()
            .ok_or_else(|| Error::Numerical("flatten backward without forward cache".into()))?;
        output_grad.clone().reshaped(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectifier_values() {
        let relu = Relu::<f64>::new();
        let x = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.5]).unwrap();
        let y = relu.forward_eval(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn subgradient_convention() {
        let mut relu = Relu::<f64>::new();
        let x = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 1.0]).unwrap();
        relu.forward_train(&x).unwrap();
        let g = relu.backward(&Tensor::filled(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn flatten_round_trip() {
        let mut fl = Flatten::new();
        let x = Tensor::<f32>::zeros(&[2, 3, 4, 5]);
        let y = fl.forward_train(&x).unwrap();
        assert_eq!(y.shape(), &[2, 60]);
        let gin: Tensor<f32> = fl.backward(&Tensor::<f32>::zeros(&[2, 60])).unwrap();
        assert_eq!(gin.shape(), &[2, 3, 4, 5]);
    }
}
