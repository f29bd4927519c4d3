use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Mean softmax cross entropy over the batch and its gradient
/// `(softmax - onehot) / n` with respect to the logits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    let k = s.c * s.h * s.w;
    if labels.len() != s.n {
        return Err(Error::shape("softmax_xent", "batch", s.n, labels.len()));
    }
    let inv_n = T::ONE / T::from_usize(s.n);
    let mut total = T::ZERO;
    let mut grad = Tensor::zeros(Shape::new(s.n, k, 1, 1));
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange {
                index: i,
                label,
                classes: k,
            });
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().fold(row[0], |a, &v| a.max(v));
        let z = row.iter().fold(T::ZERO, |a, &v| a + (v - m).exp());
        let lse = m + z.ln();
        total += lse - row[label];
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            let onehot = if j == label { T::ONE } else { T::ZERO };
            *gj = (p - onehot) * inv_n;
        }
    }
    Ok((total * inv_n, grad.reshape(s)?))
}

/// Fraction of rows whose arg-max differs from the label.
pub fn error_rate<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let s = logits.shape();
    let k = s.c * s.h * s.w;
    let wrong = labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best != label
        })
        .count();
    wrong as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::full(Shape::new(3, 5, 1, 1), 0.7f64);
        let (loss, _) = softmax_xent(&logits, &[0, 4, 2]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 4.0, 16.0, 64.0] {
            let logits = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![margin, 0.0, 0.0]).unwrap();
            let (loss, _) = softmax_xent(&logits, &[0]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f64>::zeros(Shape::new(2, 3, 1, 1));
        let err = softmax_xent(&logits, &[0, 3]).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelOutOfRange {
                index: 1,
                label: 3,
                classes: 3
            }
        ));
    }

    #[test]
    fn error_rate_counts_argmax() {
        let logits = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![1.0, 0.0, 1.0, 0.0f64]).unwrap();
        assert_eq!(error_rate(&logits, &[0, 1]), 0.5);
    }
}
