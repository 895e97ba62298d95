use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Param, ParamRole};
use crate::error::{Result, TensorError};
use crate::tensor::{expect_shape, matmul, Scalar, Tensor};

/// Fully connected layer; any input shape is flattened per sample.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    in_features: usize,
    out_features: usize,
    /// `(out_features, in_features)`
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / in_features as f64).sqrt()).expect("valid std");
        let weight = Tensor::from_fn(&[out_features, in_features], |_| T::lit(normal.sample(rng)));
        Self::from_weights(weight, Tensor::zeros(&[out_features])).expect("consistent shapes")
    }

    pub fn from_weights(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (out_features, in_features) = match *weight.shape() {
            [o, i] => (o, i),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    context: "fully connected weight",
                    expected: vec![0, 0],
                    actual: weight.shape().to_vec(),
                })
            }
        };
        expect_shape(&bias, &[out_features], "fully connected bias")?;
        Ok(Self {
            in_features,
            out_features,
            weight: Param::new(weight, ParamRole::Filter),
            bias: Param::new(bias, ParamRole::Bias),
            cache: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let per: usize = input.iter().skip(1).product();
        if input.len() < 2 || per != self.in_features {
            return Err(TensorError::ShapeMismatch {
                context: "fully connected input",
                expected: vec![input.first().copied().unwrap_or(0), self.in_features],
                actual: input.to_vec(),
            });
        }
        Ok(vec![input[0], self.out_features])
    }

    pub(crate) fn forward(&mut self, x: &Tensor<T>, cache: bool) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = cache.then(|| x.clone());
        Ok(y)
    }

    pub(crate) fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.output_shape(x.shape())?;
        let n = shape[0];
        let mut y = Tensor::zeros(&shape);
        for row in y.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(self.bias.value.data());
        }
        matmul(
            x.data(),
            false,
            self.weight.value.data(),
            true,
            y.data_mut(),
            n,
            self.in_features,
            self.out_features,
            true,
        );
        Ok(y)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let x = self.cache.as_ref().ok_or(TensorError::MissingCache { layer: "fully_connected" })?;
        let shape = self.output_shape(x.shape())?;
        expect_shape(grad, &shape, "fully connected upstream gradient")?;
        let n = shape[0];
        for row in grad.data().chunks(self.out_features) {
            for (b, &g) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *b = *b + g;
            }
        }
        matmul(
            grad.data(),
            true,
            x.data(),
            false,
            self.weight.grad.data_mut(),
            self.out_features,
            n,
            self.in_features,
            true,
        );
        if !need_input_grad {
            return Ok(None);
        }
        let mut dx = Tensor::zeros(x.shape());
        matmul(
            grad.data(),
            false,
            self.weight.value.data(),
            false,
            dx.data_mut(),
            n,
            self.out_features,
            self.in_features,
            false,
        );
        Ok(Some(dx))
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}
