//! Scalar losses returning `(value, d value / d prediction)`.

use crate::error::{Result, TensorError};
use crate::tensor::{Scalar, Tensor};

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &[T], context: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            context,
            expected: a.shape().to_vec(),
            actual: vec![b.len()],
        });
    }
    Ok(())
}

/// Weighted squared error `sum(w * (p - t)^2) / normalizer`.
pub fn weighted_mse<T: Scalar>(pred: &Tensor<T>, target: &[T], weight: &[T], normalizer: T) -> Result<(T, Tensor<T>)> {
    same_shape(pred, target, "mse target")?;
    same_shape(pred, weight, "mse weight")?;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = T::zero();
    for (((g, &p), &t), &w) in grad.data_mut().iter_mut().zip(pred.data()).zip(target).zip(weight) {
        let d = p - t;
        loss = loss + w * d * d;
        *g = T::lit(2.0) * w * d / normalizer;
    }
    Ok((loss / normalizer, grad))
}

pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &[T]) -> Result<(T, Tensor<T>)> {
    let w = vec![T::one(); pred.len()];
    weighted_mse(pred, target, &w, T::lit(pred.len().max(1) as f64))
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Weighted binary cross-entropy on logits with labels in `{0, 1}`.
pub fn weighted_bce_with_logits<T: Scalar>(logits: &Tensor<T>, labels: &[T], weight: &[T]) -> Result<(T, Tensor<T>)> {
    same_shape(logits, labels, "bce labels")?;
    same_shape(logits, weight, "bce weight")?;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = T::zero();
    for (((g, &z), &y), &w) in grad.data_mut().iter_mut().zip(logits.data()).zip(labels).zip(weight) {
        if w == T::zero() {
            continue;
        }
        // log(1 + exp(z)) - y z, evaluated stably.
        let softplus = z.max(T::zero()) + (-(z.abs())).exp().ln_1p();
        loss = loss + w * (softplus - y * z);
        *g = w * (sigmoid(z) - y);
    }
    Ok((loss, grad))
}
