//! Inverted dropout: in train mode each element is zeroed independently
//! with probability `rate` and survivors are scaled by `1/(1-rate)`, so
//! eval mode is the identity.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Dropout<F: Scalar> {
    pub rate: f64,
    /// Per-element multipliers (0 or 1/(1-rate)) from the last train pass.
    pub(crate) cache: Option<Vec<F>>,
}

impl<F: Scalar> Dropout<F> {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        Ok(Dropout { rate, cache: None })
    }

    pub fn forward_train(&mut self, input: &Tensor<F>, rng: &mut ChaCha8Rng) -> Result<Tensor<F>> {
        if self.rate == 0.0 {
            self.cache = Some(vec![F::one(); input.len()]);
            return Ok(input.clone());
        }
        let keep_scale = F::of_f64(1.0 / (1.0 - self.rate));
        let mut out = Tensor::zeros(input.shape());
        let mut mask = vec![F::zero(); input.len()];
        let out_data = out.data_mut();
        for (i, &v) in input.data().iter().enumerate() {
            if rng.random::<f64>() >= self.rate {
                mask[i] = keep_scale;
                out_data[i] = v * keep_scale;
            }
        }
        self.cache = Some(mask);
        Ok(out)
    }

    pub fn forward_eval(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(input.clone())
    }

    pub fn backward(&mut self, output_grad: &Tensor<F>) -> Result<Tensor<F>> {
        let mask = self
            .cache
            .take()
            .ok_or_else(|| Error::Numerical("dropout backward without forward cache".into()))?;
        if mask.len() != output_grad.len() {
            return Err(Error::Shape(
                "dropout backward: grad does not match cached mask".into(),
            ));
        }
        let mut gin = Tensor::zeros(output_grad.shape());
        for ((g, &m), &og) in gin
            .data_mut()
            .iter_mut()
            .zip(&mask)
            .zip(output_grad.data())
        {
            *g = m * og;
        }
        Ok(gin)
    }

    /// Multipliers applied by the last training forward pass.
    pub fn last_mask(&self) -> Option<&[F]> {
        self.cache.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn eval_mode_is_identity() {
        let layer = Dropout::<f32>::new(0.8).unwrap();
        let x = Tensor::from_vec(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(layer.forward_eval(&x).unwrap().data(), x.data());
    }

    #[test]
    fn zero_rate_is_identity_in_train_mode() {
        let mut layer = Dropout::<f32>::new(0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(layer.forward_train(&x, &mut rng).unwrap().data(), x.data());
    }

    #[test]
    fn survivor_fraction_and_mean_are_preserved() {
        let n = 100_000;
        let mut layer = Dropout::<f64>::new(0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::filled(&[n], 1.0);
        let y = layer.forward_train(&x, &mut rng).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.2).abs() < 0.01, "survivor fraction {frac}");
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn invalid_rates_are_rejected() {
        assert!(Dropout::<f32>::new(1.0).is_err());
        assert!(Dropout::<f32>::new(1.5).is_err());
        assert!(Dropout::<f32>::new(-0.1).is_err());
    }
}
