//! Row-wise softmax and the categorical cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::{as_batched_1d, Scalar, Tensor};

/// Probabilities below this are clamped before taking logs.
pub const LOSS_FLOOR: f64 = 1e-12;

/// Softmax over the last axis, computed with max-subtraction so that any
/// finite logits are safe.
#[derive(Debug, Clone, Default)]
pub struct Softmax<F: Scalar> {
    pub(crate) cache: Option<Tensor<F>>,
}

/// Softmax of a single logit vector.
pub fn softmax_vec<F: Scalar>(z: &[F]) -> Result<Vec<F>> {
    if z.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("softmax input must be finite".into()));
    }
    let max = z.iter().cloned().fold(z[0], |a, b| if b > a { b } else { a });
    let mut out: Vec<F> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: F = out.iter().cloned().sum();
    for v in &mut out {
        *v = *v / sum;
    }
    Ok(out)
}

impl<F: Scalar> Softmax<F> {
    pub fn new() -> Self {
        Softmax { cache: None }
    }

    fn run_forward(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, d) = as_batched_1d(input.shape())?;
        let mut out = Tensor::zeros(input.shape());
        let data = input.data();
        let out_data = out.data_mut();
        for s in 0..n {
            let row = softmax_vec(&data[s * d..][..d])?;
            out_data[s * d..][..d].copy_from_slice(&row);
        }
        Ok(out)
    }

    pub fn forward_train(&mut self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let out = self.run_forward(input)?;
        self.cache = Some(out.clone());
        Ok(out)
    }

    pub fn forward_eval(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        self.run_forward(input)
    }

    /// `dz_j = p_j (dp_j - sum_k dp_k p_k)` per row.
    pub fn backward(&mut self, output_grad: &Tensor<F>) -> Result<Tensor<F>> {
        let probs = self
            .cache
            .take()
            .ok_or_else(|| Error::Numerical("softmax backward without forward cache".into()))?;
        if probs.shape() != output_grad.shape() {
            return Err(Error::Shape(
                "softmax backward: grad does not match cached output".into(),
            ));
        }
        let (n, d) = as_batched_1d(probs.shape())?;
        let mut gin = Tensor::zeros(probs.shape());
        let p = probs.data();
        let dp = output_grad.data();
        let gz = gin.data_mut();
        for s in 0..n {
            let pr = &p[s * d..][..d];
            let dpr = &dp[s * d..][..d];
            let mut dot = F::zero();
            for (pv, dv) in pr.iter().zip(dpr) {
                dot = dot + *pv * *dv;
            }
            for i in 0..d {
                gz[s * d + i] = pr[i] * (dpr[i] - dot);
            }
        }
        Ok(gin)
    }
}

/// Cross-entropy of row-stochastic `probs` against 1-based labels.
///
/// Returns the summed loss over the batch and the gradient of that sum
/// w.r.t. `probs`.
pub fn cross_entropy<F: Scalar>(probs: &Tensor<F>, labels: &[usize]) -> Result<(f64, Tensor<F>)> {
    let (n, d) = as_batched_1d(probs.shape())?;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "cross_entropy: {n} probability rows but {} labels",
            labels.len()
        )));
    }
    let floor = F::of_f64(LOSS_FLOOR);
    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(probs.shape());
    let p = probs.data();
    let g = grad.data_mut();
    for (s, &y) in labels.iter().enumerate() {
        if y < 1 || y > d {
            return Err(Error::Data(format!(
                "cross_entropy: label {y} outside 1..={d}"
            )));
        }
        let mut py = p[s * d + (y - 1)];
        if py < floor {
            py = floor;
        }
        total -= py.as_f64().ln();
        g[s * d + (y - 1)] = -(F::one() / py);
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let p = softmax_vec(&[0.0f64, 0.0, 0.0, 0.0]).unwrap();
        for &v in &p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn sums_to_one_and_shift_invariant() {
        let z = vec![-3.25f64, 0.5, 11.0, 2.0, -0.75];
        let p = softmax_vec(&z).unwrap();
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for c in [-100.0, -1.0, 17.5, 100.0] {
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let ps = softmax_vec(&shifted).unwrap();
            for (a, b) in p.iter().zip(&ps) {
                assert!((a - b).abs() < 1e-12, "shift {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn softmax_of_one_two_three() {
        // Independent route: direct exponentiation without max-subtraction.
        let z = [1.0f64, 2.0, 3.0];
        let raw: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let total: f64 = raw.iter().sum();
        let expected: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let p = softmax_vec(&z).unwrap();
        for (a, e) in p.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
        // Frozen values from the oracle above.
        assert!((p[0] - 0.09003057317038046).abs() < 1e-5);
        assert!((p[1] - 0.24472847105479767).abs() < 1e-5);
        assert!((p[2] - 0.66524095577482183).abs() < 1e-5);
    }

    #[test]
    fn huge_logits_stay_finite() {
        let p = softmax_vec(&[1000.0f64, 999.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn certain_prediction_has_zero_loss() {
        let probs = Tensor::from_vec(vec![1, 2], vec![1.0f64, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&probs, &[1]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_prediction_loss_is_log_m() {
        let probs = Tensor::from_vec(vec![1, 4], vec![0.25f64; 4]).unwrap();
        let (loss, _) = cross_entropy(&probs, &[3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3862943611198906).abs() < 1e-10);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let probs = Tensor::from_vec(vec![1, 2], vec![0.0f64, 1.0]).unwrap();
        let (loss, grad) = cross_entropy(&probs, &[1]).unwrap();
        assert!(loss.is_finite());
        assert!(grad.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_cross_entropy_grad_is_p_minus_onehot() {
        let z = Tensor::from_vec(vec![1, 3], vec![0.3f64, -1.2, 2.0]).unwrap();
        let mut sm = Softmax::new();
        let p = sm.forward_train(&z).unwrap();
        let (_, dp) = cross_entropy(&p, &[2]).unwrap();
        let dz = sm.backward(&dp).unwrap();
        let expect: Vec<f64> = p
            .data()
            .iter()
            .enumerate()
            .map(|(j, &pj)| if j == 1 { pj - 1.0 } else { pj })
            .collect();
        for (a, e) in dz.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-10, "{a} vs {e}");
        }
    }
}
