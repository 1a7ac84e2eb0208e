//! Row-wise softmax helpers.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn log_softmax_row<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

pub fn log_softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let k = logits.sample_len();
    for (src, dst) in logits.data().chunks(k).zip(out.data_mut().chunks_mut(k)) {
        log_softmax_row(src, dst);
    }
    out
}

pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = log_softmax(logits);
    for v in out.data_mut() {
        *v = v.exp();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one_even_for_large_logits() {
        let z = Tensor::from_vec(&[2, 3], vec![1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0]).unwrap();
        let p = softmax(&z);
        for row in p.rows() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
