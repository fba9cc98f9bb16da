use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    /// Mean loss over the batch.
    pub loss: T,
    /// Gradient of the mean loss with respect to the logits.
    pub grad: Tensor<T>,
    pub correct: usize,
}

/// Mean softmax cross-entropy of `[B, C]` logits against 0-indexed labels.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossOutput<T>> {
    logits.expect_ndim("cross-entropy logits", 2)?;
    let (b, c) = (logits.dim(0), logits.dim(1));
    if labels.len() != b || b == 0 {
        return Err(Error::shape("cross-entropy labels", b, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::shape("cross-entropy label range", format!("< {c}"), bad));
    }
    let inv_b = T::one() / T::lit(b as f64);
    let mut grad = Tensor::zeros(&[b, c]);
    let mut total = T::zero();
    let mut correct = 0;
    for (i, (row, &y)) in logits.data().chunks(c).zip(labels).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
            grad.data_mut()[i * c + j] = (v - log_z).exp() * inv_b;
        }
        grad.data_mut()[i * c + y] -= inv_b;
        if best == y {
            correct += 1;
        }
    }
    Ok(LossOutput {
        loss: total * inv_b,
        grad,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::<f64>::zeros(&[3, 5]);
        let out = softmax_cross_entropy(&logits, &[0, 1, 4]).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
        // each row of the gradient sums to zero
        for row in out.grad.data().chunks(5) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_difference_quotient() {
        let data: Vec<f64> = vec![0.3, -1.2, 2.0, 0.5, 0.1, -0.4];
        let labels = [2usize, 0];
        let base = Tensor::from_vec(&[2, 3], data.clone()).unwrap();
        let out = softmax_cross_entropy(&base, &labels).unwrap();
        let h = 1e-6_f64;
        for i in 0..data.len() {
            let mut p = data.clone();
            p[i] += h;
            let mut m = data.clone();
            m[i] -= h;
            let lp = softmax_cross_entropy(&Tensor::from_vec(&[2, 3], p).unwrap(), &labels).unwrap().loss;
            let lm = softmax_cross_entropy(&Tensor::from_vec(&[2, 3], m).unwrap(), &labels).unwrap().loss;
            assert!(((lp - lm) / (2.0 * h) - out.grad.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::<f32>::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }
}
