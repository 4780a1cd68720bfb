//! Fully connected layer: `y = W x + b` with weight shape `[out, in]`.

use crate::error::{Error, Result};
use crate::tensor::{as_batched_1d, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct Dense<F: Scalar> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub(crate) cache: Option<Tensor<F>>,
}

impl<F: Scalar> Dense<F> {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
            cache: None,
        }
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let std = (2.0 / self.in_dim as f64).sqrt();
        for w in self.weight.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *w = F::of_f64(z * std);
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let (n, d) = as_batched_1d(shape)?;
        if d != self.in_dim {
            return Err(Error::Shape(format!(
                "dense expects input length {}, got {d}",
                self.in_dim
            )));
        }
        Ok((n, d))
    }

    fn run_forward(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, d) = self.check_input(input.shape())?;
        let o = self.out_dim;
        let mut out = if input.ndim() == 1 {
            Tensor::zeros(&[o])
        } else {
            Tensor::zeros(&[n, o])
        };
        let w = self.weight.data();
        let b = self.bias.data();
        let inp = input.data();
        let out_data = out.data_mut();
        for s in 0..n {
            let x = &inp[s * d..][..d];
            let y = &mut out_data[s * o..][..o];
            for (oi, yo) in y.iter_mut().enumerate() {
                let row = &w[oi * d..][..d];
                let mut acc = b[oi];
                for (wv, xv) in row.iter().zip(x) {
                    acc = acc + *wv * *xv;
                }
                *yo = acc;
            }
        }
        Ok(out)
    }

    pub fn forward_train(&mut self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let out = self.run_forward(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    pub fn forward_eval(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        self.run_forward(input)
    }

    pub fn backward(&mut self, output_grad: &Tensor<F>) -> Result<Tensor<F>> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| Error::Numerical("dense backward without forward cache".into()))?;
        let (n, d) = self.check_input(input.shape())?;
        let o = self.out_dim;
        if output_grad.len() != n * o {
            return Err(Error::Shape(format!(
                "dense backward: grad {:?} does not match output [{n},{o}]",
                output_grad.shape()
            )));
        }
        let mut input_grad = Tensor::zeros(input.shape());
        {
            let w = self.weight.data().to_vec();
            let wgrad = self.weight.grad_mut();
            let gin_all = input_grad.data_mut();
            let gout = output_grad.data();
            let inp = input.data();
            let mut bias_acc = vec![F::zero(); o];
            for s in 0..n {
                let x = &inp[s * d..][..d];
                let g = &gout[s * o..][..o];
                let gin = &mut gin_all[s * d..][..d];
                for oi in 0..o {
                    let go = g[oi];
                    bias_acc[oi] = bias_acc[oi] + go;
                    let wrow = &w[oi * d..][..d];
                    let wgrow = &mut wgrad[oi * d..][..d];
                    for i in 0..d {
                        wgrow[i] = wgrow[i] + go * x[i];
                        gin[i] = gin[i] + go * wrow[i];
                    }
                }
            }
            let bgrad = self.bias.grad_mut();
            for (bg, a) in bgrad.iter_mut().zip(&bias_acc) {
                *bg = *bg + *a;
            }
        }
        Ok(input_grad)
    }
}
