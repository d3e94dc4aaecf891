use super::{NnError, Scalar, Tensor};

/// Lower bound applied to probabilities inside the log.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct SoftmaxOutput<T> {
    /// Mean negative log-likelihood over the batch.
    pub loss: T,
    /// Per-sample negative log-likelihood.
    pub sample_losses: Vec<T>,
    pub probabilities: Tensor<T>,
    /// `(probabilities - one_hot) / N`.
    pub logit_grad: Tensor<T>,
}

/// Row-wise softmax with max subtraction, then mean cross-entropy against
/// integer class ids.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxOutput<T>, NnError> {
    let (n, c) = match *logits.shape() {
        [n, c] => (n, c),
        ref s => return Err(NnError::Shape(format!("logits must be [batch, classes], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(NnError::Shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(NnError::InvalidParameter(format!("label {bad} out of range for {c} classes")));
    }
    let clamp = T::of(LOG_CLAMP);
    let nf = T::of(n as f64);
    let mut probs = Vec::with_capacity(n * c);
    let mut sample_losses = Vec::with_capacity(n);
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        let start = probs.len();
        probs.extend(exps.iter().map(|&e| e / sum));
        sample_losses.push(-probs[start + label].max(clamp).ln());
    }
    let loss = sample_losses.iter().copied().sum::<T>() / nf;
    let mut grad = probs.clone();
    for (row, &label) in grad.chunks_mut(c).zip(labels) {
        row[label] = row[label] - T::one();
        row.iter_mut().for_each(|g| *g = *g / nf);
    }
    Ok(SoftmaxOutput {
        loss,
        sample_losses,
        probabilities: Tensor::from_vec(&[n, c], probs)?,
        logit_grad: Tensor::from_vec(&[n, c], grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SeededPrng;
    use proptest::prelude::*;

    #[test]
    fn symmetric_logits() {
        let out = softmax_cross_entropy(&Tensor::<f64>::zeros(&[1, 2]), &[0]).unwrap();
        assert_eq!(out.probabilities.data(), &[0.5, 0.5]);
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_and_clamped() {
        let logits = Tensor::<f64>::from_vec(&[1, 2], vec![30.0, -30.0]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[0]).unwrap().loss < 1e-6);
        let wrong = softmax_cross_entropy(&logits, &[1]).unwrap().loss;
        assert!((wrong - -(LOG_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SeededPrng::new(1);
        let logits = Tensor::<f64>::from_vec(&[3, 2], (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let labels = [0, 1, 1];
        let out = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let fd = (softmax_cross_entropy(&p, &labels).unwrap().loss
                - softmax_cross_entropy(&m, &labels).unwrap().loss)
                / (2.0 * h);
            assert!((fd - out.logit_grad.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(softmax_cross_entropy(&Tensor::<f32>::zeros(&[1, 2]), &[2]).is_err());
        assert!(softmax_cross_entropy(&Tensor::<f32>::zeros(&[2, 2]), &[0]).is_err());
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_shift_invariant(vals in proptest::collection::vec(-20.0f64..20.0, 2..20), shift in -100.0f64..100.0) {
            let n = vals.len() / 2;
            let logits = Tensor::from_vec(&[n, 2], vals[..2 * n].to_vec()).unwrap();
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let a = softmax_cross_entropy(&logits, &labels).unwrap();
            for row in a.probabilities.data().chunks(2) {
                prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
            }
            let b = softmax_cross_entropy(&logits.map(|z| z + shift), &labels).unwrap();
            prop_assert!((a.loss - b.loss).abs() < 1e-6);
            for (x, y) in a.probabilities.data().iter().zip(b.probabilities.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
