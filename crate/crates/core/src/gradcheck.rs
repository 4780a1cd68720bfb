//! Central finite-difference verification of analytic gradients.
//!
//! The harness only ever re-runs forward passes, so it is independent of
//! every backward implementation it checks.

/// Central-difference gradient of a scalar function of a flat vector.
/// The step adapts to each coordinate's magnitude.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest relative discrepancy between analytic and numeric gradients.
/// The denominator is floored so that near-zero pairs compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

use crate::engine::{cross_entropy, BatchNorm, Conv2d, Dense, Dropout, MaxPool2, Relu, Softmax};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Result of finite-difference checking one operation over several random
/// instances.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Loss functional: a fixed random linear combination of the output.
fn loss_of(out: &Tensor<f64>, c: &[f64]) -> f64 {
    out.data().iter().zip(c).map(|(o, w)| o * w).sum()
}

fn check_conv(rng: &mut ChaCha8Rng) -> f64 {
    let (c_in, c_out) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let k = rng.random_range(1..=3);
    let (h, w) = (k + rng.random_range(0..=3), k + rng.random_range(0..=3));
    let n = rng.random_range(1..=2);
    let mut layer = Conv2d::<f64>::new(c_in, c_out, k);
    layer.weight = Tensor::from_vec(
        vec![c_out, c_in, k, k],
        randn(rng, c_out * c_in * k * k),
    )
    .unwrap();
    layer.bias = Tensor::from_vec(vec![c_out], randn(rng, c_out)).unwrap();
    let input = Tensor::from_vec(vec![n, c_in, h, w], randn(rng, n * c_in * h * w)).unwrap();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let c = randn(rng, n * c_out * oh * ow);

    let mut train = layer.clone();
    train.forward_train(&input).unwrap();
    let gin = train
        .backward(&Tensor::from_vec(vec![n, c_out, oh, ow], c.clone()).unwrap())
        .unwrap();

    let f_input = |x: &[f64]| {
        let t = Tensor::from_vec(input.shape().to_vec(), x.to_vec()).unwrap();
        loss_of(&layer.forward_eval(&t).unwrap(), &c)
    };
    let f_weight = |x: &[f64]| {
        let mut l = layer.clone();
        l.weight = Tensor::from_vec(l.weight.shape().to_vec(), x.to_vec()).unwrap();
        loss_of(&l.forward_eval(&input).unwrap(), &c)
    };
    let f_bias = |x: &[f64]| {
        let mut l = layer.clone();
        l.bias = Tensor::from_vec(vec![c_out], x.to_vec()).unwrap();
        loss_of(&l.forward_eval(&input).unwrap(), &c)
    };
    [
        max_rel_err(gin.data(), &numeric_gradient(f_input, input.data())),
        max_rel_err(
            train.weight.grad().unwrap(),
            &numeric_gradient(f_weight, layer.weight.data()),
        ),
        max_rel_err(
            train.bias.grad().unwrap(),
            &numeric_gradient(f_bias, layer.bias.data()),
        ),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn check_dense(rng: &mut ChaCha8Rng) -> f64 {
    let (din, dout) = (rng.random_range(1..=6), rng.random_range(1..=5));
    let n = rng.random_range(1..=3);
    let mut layer = Dense::<f64>::new(din, dout);
    layer.weight = Tensor::from_vec(vec![dout, din], randn(rng, dout * din)).unwrap();
    layer.bias = Tensor::from_vec(vec![dout], randn(rng, dout)).unwrap();
    let input = Tensor::from_vec(vec![n, din], randn(rng, n * din)).unwrap();
    let c = randn(rng, n * dout);

    let mut train = layer.clone();
    train.forward_train(&input).unwrap();
    let gin = train
        .backward(&Tensor::from_vec(vec![n, dout], c.clone()).unwrap())
        .unwrap();

    let f_input = |x: &[f64]| {
        let t = Tensor::from_vec(vec![n, din], x.to_vec()).unwrap();
        loss_of(&layer.forward_eval(&t).unwrap(), &c)
    };
    let f_weight = |x: &[f64]| {
        let mut l = layer.clone();
        l.weight = Tensor::from_vec(vec![dout, din], x.to_vec()).unwrap();
        loss_of(&l.forward_eval(&input).unwrap(), &c)
    };
    let f_bias = |x: &[f64]| {
        let mut l = layer.clone();
        l.bias = Tensor::from_vec(vec![dout], x.to_vec()).unwrap();
        loss_of(&l.forward_eval(&input).unwrap(), &c)
    };
    [
        max_rel_err(gin.data(), &numeric_gradient(f_input, input.data())),
        max_rel_err(
            train.weight.grad().unwrap(),
            &numeric_gradient(f_weight, layer.weight.data()),
        ),
        max_rel_err(
            train.bias.grad().unwrap(),
            &numeric_gradient(f_bias, layer.bias.data()),
        ),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn check_max_pool(rng: &mut ChaCha8Rng) -> f64 {
    let (c_, h, w) = (
        rng.random_range(1..=3),
        rng.random_range(2..=6),
        rng.random_range(2..=6),
    );
    let n = rng.random_range(1..=2);
    let input = Tensor::from_vec(vec![n, c_, h, w], randn(rng, n * c_ * h * w)).unwrap();
    let c = randn(rng, n * c_ * (h / 2) * (w / 2));
    let mut pool = MaxPool2::<f64>::new();
    pool.forward_train(&input).unwrap();
    let gin = pool
        .backward(&Tensor::from_vec(vec![n, c_, h / 2, w / 2], c.clone()).unwrap())
        .unwrap();
    let eval = MaxPool2::<f64>::new();
    let f = |x: &[f64]| {
        let t = Tensor::from_vec(input.shape().to_vec(), x.to_vec()).unwrap();
        loss_of(&eval.forward_eval(&t).unwrap(), &c)
    };
    max_rel_err(gin.data(), &numeric_gradient(f, input.data()))
}

fn check_batch_norm(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c_, s) = (
        rng.random_range(2..=4),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
    );
    let mut layer = BatchNorm::<f64>::new(c_);
    layer.gamma = Tensor::from_vec(vec![c_], randn(rng, c_)).unwrap();
    layer.beta = Tensor::from_vec(vec![c_], randn(rng, c_)).unwrap();
    let input = Tensor::from_vec(vec![n, c_, s, s], randn(rng, n * c_ * s * s)).unwrap();
    let c = randn(rng, input.len());

    let mut train = layer.clone();
    train.forward_train(&input).unwrap();
    let gin = train
        .backward(&Tensor::from_vec(input.shape().to_vec(), c.clone()).unwrap())
        .unwrap();

    let f_input = |x: &[f64]| {
        let mut l = layer.clone();
        let t = Tensor::from_vec(input.shape().to_vec(), x.to_vec()).unwrap();
        loss_of(&l.forward_train(&t).unwrap(), &c)
    };
    let f_gamma = |x: &[f64]| {
        let mut l = layer.clone();
        l.gamma = Tensor::from_vec(vec![c_], x.to_vec()).unwrap();
        loss_of(&l.forward_train(&input).unwrap(), &c)
    };
    let f_beta = |x: &[f64]| {
        let mut l = layer.clone();
        l.beta = Tensor::from_vec(vec![c_], x.to_vec()).unwrap();
        loss_of(&l.forward_train(&input).unwrap(), &c)
    };
    [
        max_rel_err(gin.data(), &numeric_gradient(f_input, input.data())),
        max_rel_err(
            train.gamma.grad().unwrap(),
            &numeric_gradient(f_gamma, layer.gamma.data()),
        ),
        max_rel_err(
            train.beta.grad().unwrap(),
            &numeric_gradient(f_beta, layer.beta.data()),
        ),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn check_relu(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(3..=12);
    // Keep inputs away from the kink at zero.
    let data: Vec<f64> = randn(rng, n)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect();
    let input = Tensor::from_vec(vec![n], data).unwrap();
    let c = randn(rng, n);
    let mut relu = Relu::<f64>::new();
    relu.forward_train(&input).unwrap();
    let gin = relu
        .backward(&Tensor::from_vec(vec![n], c.clone()).unwrap())
        .unwrap();
    let eval = Relu::<f64>::new();
    let f = |x: &[f64]| {
        let t = Tensor::from_vec(vec![n], x.to_vec()).unwrap();
        loss_of(&eval.forward_eval(&t).unwrap(), &c)
    };
    max_rel_err(gin.data(), &numeric_gradient(f, input.data()))
}

fn check_dropout(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(4..=16);
    let input = Tensor::from_vec(vec![n], randn(rng, n)).unwrap();
    let c = randn(rng, n);
    let mut layer = Dropout::<f64>::new(0.5).unwrap();
    layer.forward_train(&input, rng).unwrap();
    let mask = layer.last_mask().unwrap().to_vec();
    let gin = layer
        .backward(&Tensor::from_vec(vec![n], c.clone()).unwrap())
        .unwrap();
    // With the mask held fixed, dropout is the linear map x -> mask * x.
    let f = |x: &[f64]| {
        x.iter()
            .zip(&mask)
            .zip(&c)
            .map(|((xi, m), ci)| xi * m * ci)
            .sum()
    };
    max_rel_err(gin.data(), &numeric_gradient(f, input.data()))
}

fn check_softmax(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(2..=6);
    let n = rng.random_range(1..=3);
    let input = Tensor::from_vec(vec![n, m], randn(rng, n * m)).unwrap();
    let c = randn(rng, n * m);
    let mut sm = Softmax::<f64>::new();
    sm.forward_train(&input).unwrap();
    let gin = sm
        .backward(&Tensor::from_vec(vec![n, m], c.clone()).unwrap())
        .unwrap();
    let eval = Softmax::<f64>::new();
    let f = |x: &[f64]| {
        let t = Tensor::from_vec(vec![n, m], x.to_vec()).unwrap();
        loss_of(&eval.forward_eval(&t).unwrap(), &c)
    };
    max_rel_err(gin.data(), &numeric_gradient(f, input.data()))
}

fn check_softmax_cross_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(2..=6);
    let n = rng.random_range(1..=3);
    let input = Tensor::from_vec(vec![n, m], randn(rng, n * m)).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..=m)).collect();
    let mut sm = Softmax::<f64>::new();
    let probs = sm.forward_train(&input).unwrap();
    let (_, dprobs) = cross_entropy(&probs, &labels).unwrap();
    let dz = sm.backward(&dprobs).unwrap();
    // The composed gradient equals p - onehot(y).
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..m {
            let expect = probs.data()[i * m + j] - if j + 1 == y { 1.0 } else { 0.0 };
            assert!(
                (dz.data()[i * m + j] - expect).abs() < 1e-9,
                "softmax/cross-entropy composition broke the p - onehot identity"
            );
        }
    }
    let eval = Softmax::<f64>::new();
    let f = |x: &[f64]| {
        let t = Tensor::from_vec(vec![n, m], x.to_vec()).unwrap();
        let p = eval.forward_eval(&t).unwrap();
        cross_entropy(&p, &labels).unwrap().0
    };
    max_rel_err(dz.data(), &numeric_gradient(f, input.data()))
}

/// Runs every differentiable operation through the finite-difference
/// harness on `instances` random instances each.
pub fn check_all_ops(instances: usize, seed: u64) -> Vec<OpCheck> {
    type CheckFn = fn(&mut ChaCha8Rng) -> f64;
    let checks: [(&'static str, CheckFn); 8] = [
        ("conv2d", check_conv),
        ("dense", check_dense),
        ("max_pool", check_max_pool),
        ("batch_norm", check_batch_norm),
        ("activation", check_relu),
        ("dropout", check_dropout),
        ("softmax", check_softmax),
        ("softmax+cross_entropy", check_softmax_cross_entropy),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(op_idx, (op, f))| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(
                    seed,
                    (op_idx * 10_000 + i) as u64,
                ));
                worst = worst.max(f(&mut rng));
            }
            OpCheck {
                op,
                instances,
                max_rel_err: worst,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        // f(x) = sum x_i^2, df = 2x
        let x = vec![0.5, -1.5, 2.0];
        let g = numeric_gradient(|v| v.iter().map(|a| a * a).sum(), &x);
        let expected = [1.0, -3.0, 4.0];
        assert!(max_rel_err(&expected, &g) < 1e-8);
    }

    #[test]
    fn mismatch_is_detected() {
        let x = vec![1.0];
        let g = numeric_gradient(|v| v[0] * v[0], &x);
        assert!(max_rel_err(&[2.5], &g) > 1e-1);
    }
}
