use rand::Rng;

use super::{BatchNorm, Conv2d, Layer, Mode, Relu};
use crate::error::{Result, TensorError};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_MAX_LAMBDA: f64 = 0.1;

/// `max(f, s) + lambda * min(f, s)`.
pub fn leaky_max<T: Scalar>(f: T, s: T, lambda: T) -> T {
    if f >= s {
        f + lambda * s
    } else {
        s + lambda * f
    }
}

/// Gradient shares `(d/df, d/ds)` of [`leaky_max`]; ties go to the `f` path.
pub fn leaky_max_grad<T: Scalar>(f: T, s: T, lambda: T) -> (T, T) {
    if f >= s {
        (T::one(), lambda)
    } else {
        (lambda, T::one())
    }
}

/// Residual-style block whose merge is a leaky maximum of a convolutional
/// path `F` and a skip path `S` instead of a sum.
///
/// `F` is conv3x3(stride) -> BN -> ReLU -> conv3x3 -> BN. `S` is the identity,
/// or a 1x1 convolution with the block's stride when depth or size changes.
#[derive(Clone, Debug)]
pub struct LeakyMaxBlock<T: Scalar> {
    pub path: Vec<Layer<T>>,
    pub skip: Option<Conv2d<T>>,
    pub lambda: T,
    cache: Option<(Vec<bool>, Vec<usize>)>,
}

impl<T: Scalar> LeakyMaxBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_depth: usize, out_depth: usize, stride: usize, rng: &mut R) -> Result<Self> {
        let path = vec![
            Layer::Conv(Conv2d::new(in_depth, out_depth, 3, stride, rng)?),
            Layer::BatchNorm(BatchNorm::new(out_depth)),
            Layer::Relu(Relu::new()),
            Layer::Conv(Conv2d::new(out_depth, out_depth, 3, 1, rng)?),
            Layer::BatchNorm(BatchNorm::new(out_depth)),
        ];
        let skip = if stride != 1 || in_depth != out_depth {
            Some(Conv2d::new(in_depth, out_depth, 1, stride, rng)?)
        } else {
            None
        };
        Self::from_parts(path, skip, T::lit(LEAKY_MAX_LAMBDA))
    }

    pub fn from_parts(path: Vec<Layer<T>>, skip: Option<Conv2d<T>>, lambda: T) -> Result<Self> {
        if path.is_empty() {
            return Err(TensorError::InvalidConfig("leaky max block needs a non-empty path".into()));
        }
        Ok(Self {
            path,
            skip,
            lambda,
            cache: None,
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for l in &self.path {
            shape = l.output_shape(&shape)?;
        }
        let skip_shape = match &self.skip {
            Some(s) => s.output_shape(input)?,
            None => input.to_vec(),
        };
        if skip_shape != shape {
            return Err(TensorError::ShapeMismatch {
                context: "leaky max block paths",
                expected: shape,
                actual: skip_shape,
            });
        }
        Ok(shape)
    }

    fn merge(&self, f: &Tensor<T>, s: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)> {
        if f.shape() != s.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "leaky max block paths",
                expected: f.shape().to_vec(),
                actual: s.shape().to_vec(),
            });
        }
        let mut y = f.clone();
        let mut mask = Vec::with_capacity(f.len());
        for (yv, &sv) in y.data_mut().iter_mut().zip(s.data()) {
            mask.push(*yv >= sv);
            *yv = leaky_max(*yv, sv, self.lambda);
        }
        Ok((y, mask))
    }

    pub(crate) fn forward(&mut self, x: &Tensor<T>, mode: Mode, cache: bool) -> Result<Tensor<T>> {
        let mut f = x.clone();
        for l in &mut self.path {
            f = l.forward_inner(&f, mode, cache)?;
        }
        let s = match &mut self.skip {
            Some(conv) => conv.forward(x, cache)?,
            None => x.clone(),
        };
        let (y, mask) = self.merge(&f, &s)?;
        self.cache = cache.then(|| (mask, y.shape().to_vec()));
        Ok(y)
    }

    pub(crate) fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut f = x.clone();
        for l in &self.path {
            f = l.infer_inner(&f)?;
        }
        let s = match &self.skip {
            Some(conv) => conv.infer(x)?,
            None => x.clone(),
        };
        Ok(self.merge(&f, &s)?.0)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let (mask, shape) = self.cache.as_ref().ok_or(TensorError::MissingCache { layer: "leaky_max_block" })?;
        if grad.shape() != &shape[..] {
            return Err(TensorError::ShapeMismatch {
                context: "leaky max block upstream gradient",
                expected: shape.clone(),
                actual: grad.shape().to_vec(),
            });
        }
        let mut gf = grad.clone();
        let mut gs = grad.clone();
        for ((f, s), &m) in gf.data_mut().iter_mut().zip(gs.data_mut()).zip(mask) {
            if m {
                *s = *s * self.lambda;
            } else {
                *f = *f * self.lambda;
            }
        }
        let mut g = Some(gf);
        for (i, l) in self.path.iter_mut().enumerate().rev() {
            let up = g.take().expect("inner path layers return input gradients");
            g = l.backward_inner(&up, i > 0 || need_input_grad)?;
        }
        let dskip = match &mut self.skip {
            Some(conv) => conv.backward(&gs, need_input_grad)?,
            None => need_input_grad.then_some(gs),
        };
        match (g, dskip) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b)?;
                Ok(Some(a))
            }
            _ => Ok(None),
        }
    }

    pub(crate) fn signature(&self, out: &mut Vec<u8>) {
        for l in &self.path {
            l.decision_signature(out);
        }
        if let Some((m, _)) = &self.cache {
            out.extend(m.iter().map(|&a| a as u8));
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
        for l in &mut self.path {
            l.clear_cache();
        }
        if let Some(s) = &mut self.skip {
            s.clear_cache();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_formula() {
        assert!((leaky_max(3.0f64, 5.0, 0.1) - 5.3).abs() < 1e-12);
        assert_eq!(leaky_max_grad(3.0f64, 5.0, 0.1), (0.1, 1.0));
        assert_eq!(leaky_max_grad(4.0f64, 4.0, 0.1), (1.0, 0.1));
    }
}
