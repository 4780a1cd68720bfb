//! 2x2 max pooling with stride 2. A trailing odd row or column is dropped
//! (floor semantics), which is what makes the 253 -> 126 step of the large
//! architecture come out right.

use crate::error::{Error, Result};
use crate::tensor::{as_batched_3d, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct MaxPool2<F: Scalar> {
    pub(crate) cache: Option<PoolCache>,
    _marker: std::marker::PhantomData<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct PoolCache {
    input_shape: Vec<usize>,
    /// Flat input index of each output element's argmax.
    argmax: Vec<u32>,
}

impl<F: Scalar> Default for MaxPool2<F> {
    fn default() -> Self {
        MaxPool2 {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<F: Scalar> MaxPool2<F> {
    pub fn new() -> Self {
        Self::default()
    }

    fn run_forward(&self, input: &Tensor<F>) -> Result<(Tensor<F>, Vec<u32>)> {
        let (n, [c, h, w]) = as_batched_3d(input.shape())?;
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!(
                "max_pool needs at least a 2x2 spatial extent, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = if input.ndim() == 3 {
            Tensor::zeros(&[c, oh, ow])
        } else {
            Tensor::zeros(&[n, c, oh, ow])
        };
        let mut argmax = vec![0u32; n * c * oh * ow];
        let data = input.data();
        let out_data = out.data_mut();
        for sc in 0..n * c {
            let plane = &data[sc * h * w..][..h * w];
            let out_plane = &mut out_data[sc * oh * ow..][..oh * ow];
            let arg_plane = &mut argmax[sc * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    // Ties resolve to the first element in row-major order.
                    let mut best_idx = (2 * oy) * w + 2 * ox;
                    let mut best = plane[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                    out_plane[oy * ow + ox] = best;
                    arg_plane[oy * ow + ox] = (sc * h * w + best_idx) as u32;
                }
            }
        }
        Ok((out, argmax))
    }

    pub fn forward_train(&mut self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let (out, argmax) = self.run_forward(input)?;
        self.cache = Some(PoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        });
        Ok(out)
    }

    pub fn forward_eval(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.run_forward(input)?.0)
    }

    pub fn backward(&mut self, output_grad: &Tensor<F>) -> Result<Tensor<F>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Numerical("max_pool backward without forward cache".into()))?;
        if output_grad.len() != cache.argmax.len() {
            return Err(Error::Shape(format!(
                "max_pool backward: grad has {} values, forward produced {}",
                output_grad.len(),
                cache.argmax.len()
            )));
        }
        let mut input_grad = Tensor::zeros(&cache.input_shape);
        let gin = input_grad.data_mut();
        for (&idx, &g) in cache.argmax.iter().zip(output_grad.data()) {
            gin[idx as usize] = gin[idx as usize] + g;
        }
        Ok(input_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_window() {
        let pool = MaxPool2::<f64>::new();
        let input = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = pool.forward_eval(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn floor_semantics_on_odd_extent() {
        let pool = MaxPool2::<f32>::new();
        let out = pool.forward_eval(&Tensor::zeros(&[1, 253, 253])).unwrap();
        assert_eq!(out.shape(), &[1, 126, 126]);
    }

    #[test]
    fn backward_routes_to_argmax() {
        let mut pool = MaxPool2::<f64>::new();
        let input = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        pool.forward_train(&input).unwrap();
        let gout = Tensor::from_vec(vec![1, 1, 1], vec![1.0]).unwrap();
        let gin = pool.backward(&gout).unwrap();
        assert_eq!(gin.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_route_to_first_in_row_major_order() {
        let mut pool = MaxPool2::<f64>::new();
        let input = Tensor::filled(&[1, 2, 2], 7.0);
        pool.forward_train(&input).unwrap();
        let gout = Tensor::from_vec(vec![1, 1, 1], vec![1.0]).unwrap();
        let gin = pool.backward(&gout).unwrap();
        assert_eq!(gin.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_too_small_input() {
        let pool = MaxPool2::<f32>::new();
        assert!(pool.forward_eval(&Tensor::zeros(&[1, 1, 4])).is_err());
        assert!(pool.forward_eval(&Tensor::zeros(&[1, 4, 1])).is_err());
    }
}
