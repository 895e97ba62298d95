use crate::error::{Result, TensorError};
use crate::layers::ParamRole;
use crate::network::Sequential;
use crate::tensor::{Scalar, Tensor};

/// Subtracts each output filter's mean from that filter.
///
/// The leading dimension indexes filters; a rank-1 tensor is a single filter.
pub fn centralize_weights<T: Scalar>(filters: &Tensor<T>) -> Tensor<T> {
    let mut out = filters.clone();
    centralize_in_place(&mut out);
    out
}

fn centralize_in_place<T: Scalar>(t: &mut Tensor<T>) {
    if t.is_empty() {
        return;
    }
    let per = if t.shape().len() >= 2 { t.sample_len() } else { t.len() };
    if per == 0 {
        return;
    }
    for filter in t.data_mut().chunks_mut(per) {
        let mean = filter.iter().copied().sum::<T>() / T::lit(per as f64);
        filter.iter_mut().for_each(|v| *v = *v - mean);
    }
}

/// One plain SGD update `value -= lr * g'`, where `g'` is the gradient,
/// centralized per filter when `gradient_centralization` is set.
pub fn sgd_step<T: Scalar>(value: &mut Tensor<T>, grad: &Tensor<T>, lr: T, gradient_centralization: bool) -> Result<()> {
    if value.shape() != grad.shape() {
        return Err(TensorError::ShapeMismatch {
            context: "sgd step",
            expected: value.shape().to_vec(),
            actual: grad.shape().to_vec(),
        });
    }
    grad.ensure_finite("sgd gradient")?;
    let g = if gradient_centralization {
        centralize_weights(grad)
    } else {
        grad.clone()
    };
    for (v, &d) in value.data_mut().iter_mut().zip(g.data()) {
        *v = *v - lr * d;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Centralize filter gradients before the update.
    pub gradient_centralization: bool,
    /// Re-centralize convolution filters after the update.
    pub weight_centralization: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            gradient_centralization: true,
            weight_centralization: false,
        }
    }
}

/// SGD with optional momentum over all parameters of a [`Sequential`].
///
/// With `momentum == 0` each step is exactly [`sgd_step`] per parameter.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    /// Applies accumulated gradients. The whole step is rejected, leaving
    /// every parameter untouched, if any gradient is non-finite.
    pub fn step(&mut self, net: &mut Sequential<T>) -> Result<()> {
        if let Some(layer_index) = first_non_finite(net) {
            return Err(TensorError::NonFiniteGradient { layer_index });
        }
        let cfg = self.config;
        let lr = T::lit(cfg.learning_rate);
        let mu = T::lit(cfg.momentum);
        let velocity = &mut self.velocity;
        let mut k = 0;
        net.visit_params_mut(|_, p| {
            let centralize = cfg.gradient_centralization && p.role == ParamRole::Filter;
            let g = if centralize { centralize_weights(&p.grad) } else { p.grad.clone() };
            if velocity.len() <= k {
                velocity.push(Tensor::zeros(p.value.shape()));
            }
            let v = &mut velocity[k];
            for ((vv, &gv), pv) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                *vv = mu * *vv + gv;
                *pv = *pv - lr * *vv;
            }
            if cfg.weight_centralization && p.role == ParamRole::Filter && p.value.shape().len() == 4 {
                centralize_in_place(&mut p.value);
            }
            k += 1;
        });
        Ok(())
    }
}

fn first_non_finite<T: Scalar>(net: &mut Sequential<T>) -> Option<usize> {
    let mut bad = None;
    net.visit_params_mut(|i, p| {
        if bad.is_none() && !p.grad.is_finite() {
            bad = Some(i);
        }
    });
    bad
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub gradient_centralization: bool,
    pub weight_centralization: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gradient_centralization: true,
            weight_centralization: false,
        }
    }
}

/// Adam with bias correction. Filter gradients are centralized before the
/// moment updates when `gradient_centralization` is set.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: Vec::new(),
            t: 0,
        }
    }

    /// Applies accumulated gradients; rejected as a whole on any non-finite gradient.
    pub fn step(&mut self, net: &mut Sequential<T>) -> Result<()> {
        if let Some(layer_index) = first_non_finite(net) {
            return Err(TensorError::NonFiniteGradient { layer_index });
        }
        self.t += 1;
        let cfg = self.config;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let step = T::lit(cfg.learning_rate * c2.sqrt() / c1);
        let (b1, b2, eps) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.eps * c2.sqrt()));
        let moments = &mut self.moments;
        let mut k = 0;
        net.visit_params_mut(|_, p| {
            let centralize = cfg.gradient_centralization && p.role == ParamRole::Filter;
            let g = if centralize { centralize_weights(&p.grad) } else { p.grad.clone() };
            if moments.len() <= k {
                moments.push((Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            }
            let (m, v) = &mut moments[k];
            for (((mv, vv), &gv), pv) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()).zip(p.value.data_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv = *pv - step * *mv / (vv.sqrt() + eps);
            }
            if cfg.weight_centralization && p.role == ParamRole::Filter && p.value.shape().len() == 4 {
                centralize_in_place(&mut p.value);
            }
            k += 1;
        });
        Ok(())
    }
}
