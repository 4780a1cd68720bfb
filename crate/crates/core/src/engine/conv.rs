//! Valid (no padding) 2-D convolution with square kernels, stride 1.

use crate::error::{Error, Result};
use crate::tensor::{as_batched_3d, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Convolution layer. Weight shape is `[out_channels, in_channels, k, k]`,
/// bias shape `[out_channels]`.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub(crate) cache: Option<Tensor<F>>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
            cache: None,
        }
    }

    /// He-normal weight init, zero bias.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = (self.in_channels * self.kernel * self.kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        for w in self.weight.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *w = F::of_f64(z * std);
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, [usize; 3])> {
        let (n, [c, h, w]) = as_batched_3d(shape)?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv2d expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let k = self.kernel;
        if h < k || w < k {
            return Err(Error::Shape(format!(
                "conv2d kernel {k}x{k} does not fit into {h}x{w} input"
            )));
        }
        Ok((n, [c, h, w]))
    }

    fn run_forward(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, [c_in, h, w]) = self.check_input(input.shape())?;
        input.validate_finite("conv2d input")?;
        let k = self.kernel;
        let c_out = self.out_channels;
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut out = if input.ndim() == 3 {
            Tensor::zeros(&[c_out, oh, ow])
        } else {
            Tensor::zeros(&[n, c_out, oh, ow])
        };
        let wdata = self.weight.data();
        let bias = self.bias.data();
        let inp_all = input.data();
        let out_all = out.data_mut();
        for s in 0..n {
            let inp = &inp_all[s * c_in * h * w..][..c_in * h * w];
            let outs = &mut out_all[s * c_out * oh * ow..][..c_out * oh * ow];
            for oc in 0..c_out {
                let out_c = &mut outs[oc * oh * ow..][..oh * ow];
                out_c.fill(bias[oc]);
                for ic in 0..c_in {
                    let in_c = &inp[ic * h * w..][..h * w];
                    let w_ic = &wdata[(oc * c_in + ic) * k * k..][..k * k];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = w_ic[ky * k + kx];
                            for oy in 0..oh {
                                let in_row = &in_c[(oy + ky) * w + kx..][..ow];
                                let out_row = &mut out_c[oy * ow..][..ow];
                                for (o, i) in out_row.iter_mut().zip(in_row) {
                                    *o = *o + wv * *i;
                                }
                            }
                        }
                    }
                }
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
            .ok_or_else(|| Error::Numerical("conv2d backward without forward cache".into()))?;
        let (n, [c_in, h, w]) = self.check_input(input.shape())?;
        let k = self.kernel;
        let c_out = self.out_channels;
        let (oh, ow) = (h - k + 1, w - k + 1);
        let expect: usize = n * c_out * oh * ow;
        if output_grad.len() != expect {
            return Err(Error::Shape(format!(
                "conv2d backward: output grad {:?} does not match forward output [{n},{c_out},{oh},{ow}]",
                output_grad.shape()
            )));
        }
        let mut input_grad = Tensor::zeros(input.shape());
        {
            let wdata = self.weight.data().to_vec();
            let wgrad = self.weight.grad_mut();
            let gin_all = input_grad.data_mut();
            let gout_all = output_grad.data();
            let inp_all = input.data();
            let mut bias_acc = vec![F::zero(); c_out];
            for s in 0..n {
                let inp = &inp_all[s * c_in * h * w..][..c_in * h * w];
                let gin = &mut gin_all[s * c_in * h * w..][..c_in * h * w];
                let gout = &gout_all[s * c_out * oh * ow..][..c_out * oh * ow];
                for oc in 0..c_out {
                    let g_c = &gout[oc * oh * ow..][..oh * ow];
                    let mut bsum = F::zero();
                    for &g in g_c {
                        bsum = bsum + g;
                    }
                    bias_acc[oc] = bias_acc[oc] + bsum;
                    for ic in 0..c_in {
                        let in_c = &inp[ic * h * w..][..h * w];
                        let gin_c = &mut gin[ic * h * w..][..h * w];
                        let base = (oc * c_in + ic) * k * k;
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = wdata[base + ky * k + kx];
                                let mut acc = F::zero();
                                for oy in 0..oh {
                                    let in_row = &in_c[(oy + ky) * w + kx..][..ow];
                                    let g_row = &g_c[oy * ow..][..ow];
                                    let gin_row = &mut gin_c[(oy + ky) * w + kx..][..ow];
                                    for x in 0..ow {
                                        let g = g_row[x];
                                        acc = acc + in_row[x] * g;
                                        gin_row[x] = gin_row[x] + wv * g;
                                    }
                                }
                                wgrad[base + ky * k + kx] = wgrad[base + ky * k + kx] + acc;
                            }
                        }
                    }
                }
            }
            let bgrad = self.bias.grad_mut();
            for (b, a) in bgrad.iter_mut().zip(&bias_acc) {
                *b = *b + *a;
            }
        }
        Ok(input_grad)
    }
}
