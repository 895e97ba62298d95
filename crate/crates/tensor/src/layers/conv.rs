use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Param, ParamRole};
use crate::error::{Result, TensorError};
use crate::tensor::{expect_shape, matmul, Scalar, Tensor};

/// Spatial output size for an odd kernel with `floor(k/2)` padding: `ceil(n / stride)`.
pub fn conv_output_dim(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// 2D cross-correlation with "same" padding of `floor(k/2)` before striding.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    in_depth: usize,
    out_depth: usize,
    kernel: usize,
    stride: usize,
    /// `(out_depth, in_depth, k, k)`
    pub weight: Param<T>,
    /// `(out_depth)`
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialised convolution.
    pub fn new<R: Rng + ?Sized>(in_depth: usize, out_depth: usize, kernel: usize, stride: usize, rng: &mut R) -> Result<Self> {
        let fan_in = (in_depth * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = Tensor::from_fn(&[out_depth, in_depth, kernel, kernel], |_| T::lit(normal.sample(rng)));
        Self::from_weights(weight, Tensor::zeros(&[out_depth]), stride)
    }

    pub fn from_weights(weight: Tensor<T>, bias: Tensor<T>, stride: usize) -> Result<Self> {
        let (out_depth, in_depth, kh, kw) = weight.dims4("conv weight")?;
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::InvalidConfig(format!(
                "conv kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(TensorError::InvalidConfig(format!("conv stride must be 1 or 2, got {stride}")));
        }
        expect_shape(&bias, &[out_depth], "conv bias")?;
        Ok(Self {
            in_depth,
            out_depth,
            kernel: kh,
            stride,
            weight: Param::new(weight, ParamRole::Filter),
            bias: Param::new(bias, ParamRole::Bias),
            cache: None,
        })
    }

    pub fn in_depth(&self) -> usize {
        self.in_depth
    }

    pub fn out_depth(&self) -> usize {
        self.out_depth
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [n, c, h, w] if c == self.in_depth && h > 0 && w > 0 => Ok(vec![
                n,
                self.out_depth,
                conv_output_dim(h, self.stride),
                conv_output_dim(w, self.stride),
            ]),
            _ => Err(TensorError::ShapeMismatch {
                context: "conv input",
                expected: vec![input.first().copied().unwrap_or(0), self.in_depth, 0, 0],
                actual: input.to_vec(),
            }),
        }
    }

    pub(crate) fn forward(&mut self, x: &Tensor<T>, cache: bool) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = cache.then(|| x.clone());
        Ok(y)
    }

    pub(crate) fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(x.shape())?;
        let (n, c, h, w) = x.dims4("conv input")?;
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let k = self.kernel;
        let ckk = c * k * k;
        let mut cols = vec![T::zero(); ckk * ho * wo];
        let mut y = Tensor::zeros(&out_shape);
        let bias = self.bias.value.data();
        for i in 0..n {
            im2col(x.sample(i), c, h, w, k, self.stride, ho, wo, &mut cols);
            let out = y.sample_mut(i);
            for (o, plane) in out.chunks_mut(ho * wo).enumerate() {
                plane.fill(bias[o]);
            }
            matmul(
                self.weight.value.data(),
                false,
                &cols,
                false,
                out,
                self.out_depth,
                ckk,
                ho * wo,
                true,
            );
        }
        Ok(y)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let x = self.cache.as_ref().ok_or(TensorError::MissingCache { layer: "conv" })?;
        let out_shape = self.output_shape(x.shape())?;
        expect_shape(grad, &out_shape, "conv upstream gradient")?;
        let (n, c, h, w) = x.dims4("conv input")?;
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let k = self.kernel;
        let ckk = c * k * k;
        let hw = ho * wo;
        let mut cols = vec![T::zero(); ckk * hw];
        let mut dcols = vec![T::zero(); ckk * hw];
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        for i in 0..n {
            let g = grad.sample(i);
            for (o, plane) in g.chunks(hw).enumerate() {
                let s: T = plane.iter().copied().sum();
                let b = &mut self.bias.grad.data_mut()[o];
                *b = *b + s;
            }
            im2col(x.sample(i), c, h, w, k, self.stride, ho, wo, &mut cols);
            matmul(g, false, &cols, true, self.weight.grad.data_mut(), self.out_depth, hw, ckk, true);
            if let Some(dx) = dx.as_mut() {
                matmul(self.weight.value.data(), true, g, false, &mut dcols, ckk, self.out_depth, hw, false);
                col2im(&dcols, c, h, w, k, self.stride, ho, wo, dx.sample_mut(i));
            }
        }
        Ok(dx)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Output columns `ox` whose input column `ox*stride + kx - pad` lies inside `[0, w)`.
fn valid_range(kx: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let start = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let end = if w + pad < kx + 1 {
        0
    } else {
        ((w - 1 + pad - kx) / stride + 1).min(wo)
    };
    (start.min(end), end)
}

/// Unfolds one sample `(c, h, w)` into a `(c*k*k, ho*wo)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, ho: usize, wo: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw_out;
                let dst = &mut cols[row..row + hw_out];
                let (ox0, ox1) = valid_range(kx, pad, stride, w, wo);
                for oy in 0..ho {
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out_row[..ox0].fill(T::zero());
                    out_row[ox1..].fill(T::zero());
                    if ox1 > ox0 {
                        let ix0 = ox0 * stride + kx - pad;
                        if stride == 1 {
                            out_row[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for (j, v) in out_row[ox0..ox1].iter_mut().enumerate() {
                                *v = src[ix0 + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input sample.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, ho: usize, wo: usize, dx: &mut [T]) {
    let pad = k / 2;
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw_out;
                let src = &cols[row..row + hw_out];
                let (ox0, ox1) = valid_range(kx, pad, stride, w, wo);
                if ox1 <= ox0 {
                    continue;
                }
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let g = &src[oy * wo..(oy + 1) * wo];
                    let ix0 = ox0 * stride + kx - pad;
                    for (j, &v) in g[ox0..ox1].iter().enumerate() {
                        let d = &mut dst[ix0 + j * stride];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}
