//! Per-channel batch normalization.
//!
//! Training mode normalizes each channel over the whole batch (and any
//! spatial extent), applies the learnable scale/shift and updates running
//! statistics with an exponential moving average:
//! `running = (1 - momentum) * running + momentum * batch_stat`, where the
//! running variance uses the unbiased batch variance. Eval mode normalizes
//! with the running statistics.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_DEFAULT_MOMENTUM: f64 = 0.1;
pub const BN_DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchNorm<F: Scalar> {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub(crate) cache: Option<BnCache<F>>,
}

#[derive(Debug, Clone)]
pub(crate) struct BnCache<F: Scalar> {
    shape: Vec<usize>,
    xhat: Vec<F>,
    inv_std: Vec<f64>,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            momentum: BN_DEFAULT_MOMENTUM,
            eps: BN_DEFAULT_EPS,
            gamma: Tensor::filled(&[channels], F::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], F::one()),
            cache: None,
        }
    }

    /// Interprets the input as `[N, C, spatial...]` and returns
    /// `(batch, channels, spatial)`.
    fn layout(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "batch_norm expects a batched input, got {shape:?}"
            )));
        }
        let n = shape[0];
        let c = shape[1];
        if c != self.channels {
            return Err(Error::Shape(format!(
                "batch_norm has {} channels, input has {c}",
                self.channels
            )));
        }
        let spatial: usize = shape[2..].iter().product();
        Ok((n, c, spatial))
    }

    pub fn forward_train(&mut self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, c, spatial) = self.layout(input.shape())?;
        if n < 2 {
            return Err(Error::Config(
                "batch_norm needs a batch of at least 2 samples in train mode".into(),
            ));
        }
        let m = (n * spatial) as f64;
        let data = input.data();
        let mut out = Tensor::zeros(input.shape());
        let mut xhat = vec![F::zero(); data.len()];
        let mut inv_stds = vec![0.0f64; c];
        let gamma = self.gamma.data();
        let beta = self.beta.data();
        let rmean = self.running_mean.data_mut();
        let out_data = out.data_mut();
        let mut rvars = vec![0.0f64; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for &v in &data[base..base + spatial] {
                    sum += v.as_f64();
                }
            }
            let mean = sum / m;
            let mut ss = 0.0f64;
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for &v in &data[base..base + spatial] {
                    let d = v.as_f64() - mean;
                    ss += d * d;
                }
            }
            let var = ss / m;
            let inv_std = 1.0 / (var + self.eps).sqrt();
            inv_stds[ch] = inv_std;
            let g = gamma[ch].as_f64();
            let b = beta[ch].as_f64();
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in base..base + spatial {
                    let xh = (data[i].as_f64() - mean) * inv_std;
                    xhat[i] = F::of_f64(xh);
                    out_data[i] = F::of_f64(g * xh + b);
                }
            }
            let unbiased = ss / (m - 1.0);
            rmean[ch] = F::of_f64(
                (1.0 - self.momentum) * rmean[ch].as_f64() + self.momentum * mean,
            );
            rvars[ch] = unbiased;
        }
        let rvar = self.running_var.data_mut();
        for ch in 0..c {
            rvar[ch] =
                F::of_f64((1.0 - self.momentum) * rvar[ch].as_f64() + self.momentum * rvars[ch]);
        }
        self.cache = Some(BnCache {
            shape: input.shape().to_vec(),
            xhat,
            inv_std: inv_stds,
        });
        Ok(out)
    }

    pub fn forward_eval(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, c, spatial) = self.layout(input.shape())?;
        let mut out = Tensor::zeros(input.shape());
        let data = input.data();
        let out_data = out.data_mut();
        for ch in 0..c {
            let mean = self.running_mean.data()[ch].as_f64();
            let var = self.running_var.data()[ch].as_f64();
            let inv_std = 1.0 / (var + self.eps).sqrt();
            let g = self.gamma.data()[ch].as_f64();
            let b = self.beta.data()[ch].as_f64();
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in base..base + spatial {
                    out_data[i] = F::of_f64(g * ((data[i].as_f64() - mean) * inv_std) + b);
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, output_grad: &Tensor<F>) -> Result<Tensor<F>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Numerical("batch_norm backward without forward cache".into()))?;
        if output_grad.shape() != cache.shape.as_slice() {
            return Err(Error::Shape(format!(
                "batch_norm backward: grad shape {:?} != forward shape {:?}",
                output_grad.shape(),
                cache.shape
            )));
        }
        let (n, c, spatial) = self.layout(&cache.shape)?;
        let m = (n * spatial) as f64;
        let gout = output_grad.data();
        let mut input_grad = Tensor::zeros(&cache.shape);
        let gin = input_grad.data_mut();
        let gamma_vals: Vec<f64> = self.gamma.data().iter().map(|v| v.as_f64()).collect();
        let mut gamma_acc = vec![0.0f64; c];
        let mut beta_acc = vec![0.0f64; c];
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in base..base + spatial {
                    let dy = gout[i].as_f64();
                    sum_dy += dy;
                    sum_dy_xhat += dy * cache.xhat[i].as_f64();
                }
            }
            gamma_acc[ch] = sum_dy_xhat;
            beta_acc[ch] = sum_dy;
            let scale = gamma_vals[ch] * cache.inv_std[ch];
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in base..base + spatial {
                    let dy = gout[i].as_f64();
                    let xh = cache.xhat[i].as_f64();
                    gin[i] = F::of_f64(scale * (dy - sum_dy / m - xh * sum_dy_xhat / m));
                }
            }
        }
        let ggamma = self.gamma.grad_mut();
        for ch in 0..c {
            ggamma[ch] = ggamma[ch] + F::of_f64(gamma_acc[ch]);
        }
        let gbeta = self.beta.grad_mut();
        for ch in 0..c {
            gbeta[ch] = gbeta[ch] + F::of_f64(beta_acc[ch]);
        }
        Ok(input_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_batch_maps_to_zero() {
        let mut bn = BatchNorm::<f64>::new(3);
        let input = Tensor::filled(&[4, 3, 2, 2], 5.0);
        let out = bn.forward_train(&input).unwrap();
        for &v in out.data() {
            assert!(v.abs() < 1e-6, "expected ~0, got {v}");
        }
    }

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut bn = BatchNorm::<f64>::new(2);
        let mut input = Tensor::zeros(&[8, 2, 3, 3]);
        for (i, v) in input.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 + 11) % 23) as f64 * 0.7 - 5.0;
        }
        let out = bn.forward_train(&input).unwrap();
        let (n, c, spatial) = (8, 2, 9);
        for ch in 0..c {
            let mut vals = Vec::new();
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                vals.extend_from_slice(&out.data()[base..base + spatial]);
            }
            let m = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / m;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn running_stats_match_hand_computation() {
        // Batch {0, 2} on a single channel: mean 1, biased var 1, unbiased 2.
        // With momentum 0.1 and torch-style init (mean 0, var 1):
        //   running_mean = 0.9*0 + 0.1*1 = 0.1
        //   running_var  = 0.9*1 + 0.1*2 = 1.1
        let mut bn = BatchNorm::<f64>::new(1);
        let input = Tensor::from_vec(vec![2, 1], vec![0.0, 2.0]).unwrap();
        bn.forward_train(&input).unwrap();
        assert!((bn.running_mean.data()[0] - 0.1).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - 1.1).abs() < 1e-12);
        // Eval now normalizes with the running stats.
        let x = Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap();
        let out = bn.forward_eval(&x).unwrap();
        let expected = (1.0 - 0.1) / (1.1f64 + BN_DEFAULT_EPS).sqrt();
        assert!((out.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected_in_train_mode() {
        let mut bn = BatchNorm::<f32>::new(2);
        let input = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(bn.forward_train(&input).is_err());
        assert!(bn.forward_eval(&input).is_ok());
    }
}
