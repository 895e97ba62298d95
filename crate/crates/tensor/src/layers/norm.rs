use super::{Param, ParamRole};
use crate::error::{Result, TensorError};
use crate::tensor::{expect_shape, Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Splits an activation shape into (batch, channels, spatial) for per-channel statistics.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [n, c] => Some((*n, *c, 1)),
        [n, c, rest @ ..] => Some((*n, *c, rest.iter().product())),
        _ => None,
    }
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
    batch_stats: bool,
}

/// Per-channel batch normalization with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Scalar> {
    channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    momentum: T,
    eps: T,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(Tensor::full(&[channels], T::one()), ParamRole::Scale),
            beta: Param::new(Tensor::zeros(&[channels]), ParamRole::Shift),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: T::lit(BN_MOMENTUM),
            eps: T::lit(NORM_EPS),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn layout(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        match channel_layout(shape) {
            Some(l) if l.1 == self.channels => Ok(l),
            _ => Err(TensorError::ShapeMismatch {
                context: "batchnorm input",
                expected: vec![shape.first().copied().unwrap_or(0), self.channels],
                actual: shape.to_vec(),
            }),
        }
    }

    /// Training mode normalises with the statistics of this batch and updates
    /// the running estimates; inference mode uses the running estimates only.
    pub(crate) fn forward(&mut self, x: &Tensor<T>, batch_stats: bool, cache: bool) -> Result<Tensor<T>> {
        let (n, c, s) = self.layout(x.shape())?;
        let m = n * s;
        let (mean, var) = if batch_stats {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * s;
                    acc = acc + x.data()[base..base + s].iter().copied().sum::<T>();
                }
                let mu = acc / T::lit(m as f64);
                let mut sq = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * s;
                    for &v in &x.data()[base..base + s] {
                        sq = sq + (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / T::lit(m as f64);
            }
            let unbias = if m > 1 { T::lit(m as f64 / (m - 1) as f64) } else { T::one() };
            for ch in 0..c {
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = (T::one() - self.momentum) * *rm + self.momentum * mean[ch];
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = (T::one() - self.momentum) * *rv + self.momentum * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (self.running_mean.data().to_vec(), self.running_var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        let mut y = Tensor::zeros(x.shape());
        let mut xhat = if cache { vec![T::zero(); x.len()] } else { Vec::new() };
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    let h = (x.data()[j] - mean[ch]) * inv_std[ch];
                    y.data_mut()[j] = g[ch] * h + b[ch];
                    if cache {
                        xhat[j] = h;
                    }
                }
            }
        }
        self.cache = cache.then(|| BnCache {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
            batch_stats,
        });
        Ok(y)
    }

    pub(crate) fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, s) = self.layout(x.shape())?;
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        let mut scale = vec![T::zero(); c];
        let mut shift = vec![T::zero(); c];
        for ch in 0..c {
            let inv = T::one() / (self.running_var.data()[ch] + self.eps).sqrt();
            scale[ch] = g[ch] * inv;
            shift[ch] = b[ch] - g[ch] * inv * self.running_mean.data()[ch];
        }
        let mut y = x.clone();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for v in &mut y.data_mut()[base..base + s] {
                    *v = *v * scale[ch] + shift[ch];
                }
            }
        }
        Ok(y)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(TensorError::MissingCache { layer: "batchnorm" })?;
        expect_shape(grad, &cache.shape, "batchnorm upstream gradient")?;
        let (n, c, s) = self.layout(&cache.shape)?;
        let m = T::lit((n * s) as f64);
        let mut dx = Tensor::zeros(&cache.shape);
        for ch in 0..c {
            let gamma = self.gamma.value.data()[ch];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    sum_g = sum_g + grad.data()[j];
                    sum_gx = sum_gx + grad.data()[j] * cache.xhat[j];
                }
            }
            self.gamma.grad.data_mut()[ch] = self.gamma.grad.data()[ch] + sum_gx;
            self.beta.grad.data_mut()[ch] = self.beta.grad.data()[ch] + sum_g;
            let inv = cache.inv_std[ch];
            for i in 0..n {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    dx.data_mut()[j] = if cache.batch_stats {
                        gamma * inv / m * (m * grad.data()[j] - sum_g - cache.xhat[j] * sum_gx)
                    } else {
                        gamma * inv * grad.data()[j]
                    };
                }
            }
        }
        Ok(dx)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Clone, Debug)]
struct TnCache<T> {
    active: Vec<bool>,
    z: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

/// `max(0, x)` followed, when enabled, by per-sample standardisation over all
/// activations of that sample (mean 0, variance 1).
#[derive(Clone, Debug)]
pub struct ReluTn<T: Scalar> {
    pub tn_enabled: bool,
    eps: T,
    cache: Option<TnCache<T>>,
}

impl<T: Scalar> ReluTn<T> {
    pub fn new(tn_enabled: bool) -> Self {
        Self {
            tn_enabled,
            eps: T::lit(NORM_EPS),
            cache: None,
        }
    }

    pub(crate) fn forward(&mut self, x: &Tensor<T>, cache: bool) -> Result<Tensor<T>> {
        let (y, inv_std) = self.compute(x);
        self.cache = cache.then(|| TnCache {
            active: x.data().iter().map(|&v| v > T::zero()).collect(),
            z: y.data().to_vec(),
            inv_std,
            shape: x.shape().to_vec(),
        });
        Ok(y)
    }

    pub(crate) fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.compute(x).0)
    }

    fn compute(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        let mut y = x.map(|v| v.max(T::zero()));
        let mut inv_stds = Vec::new();
        if self.tn_enabled && x.batch() > 0 {
            let n = x.batch();
            let len = T::lit(x.sample_len() as f64);
            for i in 0..n {
                let s = y.sample_mut(i);
                let mean = lane_sum(s, |v| v) / len;
                let var = lane_sum(s, |v| (v - mean) * (v - mean)) / len;
                let inv = T::one() / (var + self.eps).sqrt();
                s.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                inv_stds.push(inv);
            }
        }
        (y, inv_stds)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(TensorError::MissingCache { layer: "relu_tn" })?;
        expect_shape(grad, &cache.shape, "relu_tn upstream gradient")?;
        let mut dx = grad.clone();
        if self.tn_enabled {
            let per = dx.sample_len();
            let len = T::lit(per as f64);
            for i in 0..dx.batch() {
                let z = &cache.z[i * per..(i + 1) * per];
                let g = dx.sample_mut(i);
                let sum_g = g.iter().copied().sum::<T>();
                let sum_gz = g.iter().zip(z).map(|(&a, &b)| a * b).sum::<T>();
                let inv = cache.inv_std[i];
                for (gv, &zv) in g.iter_mut().zip(z) {
                    *gv = inv / len * (len * *gv - sum_g - zv * sum_gz);
                }
            }
        }
        for (d, &a) in dx.data_mut().iter_mut().zip(&cache.active) {
            if !a {
                *d = T::zero();
            }
        }
        Ok(dx)
    }

    pub(crate) fn signature(&self, out: &mut Vec<u8>) {
        if let Some(c) = &self.cache {
            out.extend(c.active.iter().map(|&a| a as u8));
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Plain rectified linear unit.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    cache: Option<(Vec<bool>, Vec<usize>)>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn forward<T: Scalar>(&mut self, x: &Tensor<T>, cache: bool) -> Tensor<T> {
        self.cache = cache.then(|| (x.data().iter().map(|&v| v > T::zero()).collect(), x.shape().to_vec()));
        Self::infer(x)
    }

    pub(crate) fn infer<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| v.max(T::zero()))
    }

    pub(crate) fn backward<T: Scalar>(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (mask, shape) = self.cache.as_ref().ok_or(TensorError::MissingCache { layer: "relu" })?;
        expect_shape(grad, shape, "relu upstream gradient")?;
        let mut dx = grad.clone();
        for (d, &a) in dx.data_mut().iter_mut().zip(mask) {
            if !a {
                *d = T::zero();
            }
        }
        Ok(dx)
    }

    pub(crate) fn signature(&self, out: &mut Vec<u8>) {
        if let Some((m, _)) = &self.cache {
            out.extend(m.iter().map(|&a| a as u8));
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Sum of `f` over `xs` with eight independent accumulators.
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = *a + f(v);
        }
    }
    let mut total = tail.iter().fold(T::zero(), |t, &v| t + f(v));
    for a in acc {
        total = total + a;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tn_standardises_two_values() {
        let tn = ReluTn::<f64>::new(true);
        let y = tn.infer(&Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap()).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn tn_disabled_is_plain_relu() {
        let tn = ReluTn::<f32>::new(false);
        let y = tn.infer(&Tensor::new(vec![1, 3], vec![-1.0, 0.5, 2.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 2.0]);
    }

    #[test]
    fn tn_all_zero_sample_stays_zero() {
        let tn = ReluTn::<f32>::new(true);
        let y = tn.infer(&Tensor::new(vec![1, 3], vec![-1.0, -2.0, 0.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_backward_masks() {
        let mut r = Relu::new();
        r.forward(&Tensor::new(vec![1, 2], vec![-2.0f32, 5.0]).unwrap(), true);
        let g = r.backward(&Tensor::new(vec![1, 2], vec![1.0f32, 1.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn batchnorm_inference_uses_running_stats() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.running_mean.data_mut()[0] = 2.0;
        bn.running_var.data_mut()[0] = 4.0 - NORM_EPS;
        bn.gamma.value.data_mut()[0] = 3.0;
        bn.beta.value.data_mut()[0] = 1.0;
        let y = bn.infer(&Tensor::new(vec![1, 1, 1, 2], vec![2.0, 4.0]).unwrap()).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_running_stats_move_with_momentum() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        bn.forward(&x, true, false).unwrap();
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((bn.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
