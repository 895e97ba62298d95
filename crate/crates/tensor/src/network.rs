use crate::error::Result;
use crate::layers::{Layer, Mode, Param};
use crate::tensor::{Scalar, Tensor};

/// A feed-forward chain of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential<T: Scalar> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        x.ensure_finite("network input")?;
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward_inner(&h, mode, true)?;
        }
        Ok(h)
    }

    /// Inference with running batch-norm statistics; every sample of the
    /// batch is processed independently of the others.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.ensure_finite("network input")?;
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer_inner(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward_inner(&g, true)?.expect("input gradient requested");
        }
        Ok(g)
    }

    /// Like [`Sequential::backward`] but skips the gradient w.r.t. the network input.
    pub fn backward_params(&mut self, grad: &Tensor<T>) -> Result<()> {
        let mut g = Some(grad.clone());
        for (i, l) in self.layers.iter_mut().enumerate().rev() {
            let up = g.take().expect("gradient flows between layers");
            g = l.backward_inner(&up, i > 0)?;
        }
        Ok(())
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for l in &self.layers {
            shape = l.output_shape(&shape)?;
        }
        Ok(shape)
    }

    /// Visits every trainable parameter with the index of its top-level layer.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(usize, &mut Param<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&mut |p| f(i, p));
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(|_, p| p.zero_grad());
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params_mut(|_, p| n += p.value.len());
        n
    }
}
